//! Network-level conditions: the weighted block-matrix inequality over the
//! coupling, inclusion of the coupled abstract states in the internal input
//! grids, the search for weights, and the aggregate certification run.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    asymmetry, check_dwell_time, check_flow_dissipativity, check_jump_dissipativity, check_sandwich, check_triangle,
    CertificateError, Certificate, CheckReport, DwellReport, SampleConfig, SimCase, SYMMETRY_TOL,
};
use crate::grid::Grid;
use crate::model::NetworkSpec;

pub const DEFAULT_LMI_TOL: f64 = 1e-9;
pub const DEFAULT_INCLUSION_CAP: usize = 1_000_000;
const INCLUSION_TOL: f64 = 1e-9;
const LISTED_VIOLATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub passed: bool,
    pub max_eigenvalue: f64,
    /// Eigenvalues of the symmetrised `Q`, largest first.
    pub eigenvalues: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub tolerance: f64,
}

fn offsets(sizes: impl Iterator<Item = usize>) -> (Vec<usize>, usize) {
    let mut acc = 0;
    let offs = sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect();
    (offs, acc)
}

/// `Q = [M; I]ᵀ 𝐃(μ₁D₁, …, μ_N D_N) [M; I]`.
///
/// `𝐃` places the ω-blocks of all subsystems first and the x-blocks after them;
/// `dims[i] = (q_i, n_i)` splits `D_i` into its conformal blocks.
pub fn assemble_q(
    m: &DMatrix<f64>,
    d_list: &[DMatrix<f64>],
    dims: &[(usize, usize)],
    mu: &[f64],
) -> Result<DMatrix<f64>, CertificateError> {
    if d_list.len() != dims.len() || mu.len() != dims.len() {
        return Err(CertificateError::Dimension {
            what: "subsystem count".into(),
            expected: dims.len(),
            got: d_list.len().min(mu.len()),
        });
    }
    for (i, &v) in mu.iter().enumerate() {
        if !(v >= 0.0) {
            return Err(CertificateError::NegativeMu { index: i, value: v });
        }
    }
    let (q_off, q_tot) = offsets(dims.iter().map(|d| d.0));
    let (n_off, n_tot) = offsets(dims.iter().map(|d| d.1));
    if m.nrows() != q_tot || m.ncols() != n_tot {
        return Err(CertificateError::Dimension {
            what: format!("coupling matrix ({}x{})", m.nrows(), m.ncols()),
            expected: q_tot * n_tot,
            got: m.nrows() * m.ncols(),
        });
    }
    let mut big = DMatrix::zeros(q_tot + n_tot, q_tot + n_tot);
    for (i, d) in d_list.iter().enumerate() {
        let (q, n) = dims[i];
        if d.shape() != (q + n, q + n) {
            return Err(CertificateError::Dimension {
                what: format!("supply matrix of subsystem {i}"),
                expected: q + n,
                got: d.nrows(),
            });
        }
        let asym = asymmetry(d);
        if asym > SYMMETRY_TOL * (1.0 + d.amax()) {
            return Err(CertificateError::NotSymmetric {
                which: format!("supply matrix of subsystem {i}"),
                asymmetry: asym,
            });
        }
        let (qo, no) = (q_off[i], q_tot + n_off[i]);
        let s = mu[i];
        big.view_mut((qo, qo), (q, q)).copy_from(&(d.view((0, 0), (q, q)) * s));
        big.view_mut((qo, no), (q, n)).copy_from(&(d.view((0, q), (q, n)) * s));
        big.view_mut((no, qo), (n, q)).copy_from(&(d.view((q, 0), (n, q)) * s));
        big.view_mut((no, no), (n, n)).copy_from(&(d.view((q, q), (n, n)) * s));
    }
    let mut stack = DMatrix::zeros(q_tot + n_tot, n_tot);
    stack.view_mut((0, 0), (q_tot, n_tot)).copy_from(m);
    stack.view_mut((q_tot, 0), (n_tot, n_tot)).fill_with_identity();
    let q = stack.transpose() * big * &stack;
    let asym = asymmetry(&q);
    assert!(
        asym <= 1e-9 * (1.0 + q.amax()),
        "assembled Q is not symmetric (asymmetry {asym:e}) although every D_i is"
    );
    Ok((&q + q.transpose()) * 0.5)
}

fn max_eigenvalue(q: &DMatrix<f64>) -> f64 {
    if q.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    q.symmetric_eigenvalues().max()
}

/// Passes iff the largest eigenvalue of the symmetrised `Q` is at most `tol`.
pub fn check_compositionality(
    m: &DMatrix<f64>,
    d_list: &[DMatrix<f64>],
    dims: &[(usize, usize)],
    mu: &[f64],
    tol: f64,
) -> Result<CompositionReport, CertificateError> {
    let q = assemble_q(m, d_list, dims, mu)?;
    let mut eigenvalues: Vec<f64> = if q.nrows() == 0 {
        Vec::new()
    } else {
        q.symmetric_eigenvalues().iter().copied().collect()
    };
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let max_eigenvalue = eigenvalues.first().copied().unwrap_or(f64::NEG_INFINITY);
    Ok(CompositionReport {
        passed: max_eigenvalue <= tol,
        max_eigenvalue,
        eigenvalues,
        q: q.row_iter().map(|r| r.iter().copied().collect()).collect(),
        mu: mu.to_vec(),
        tolerance: tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSearchReport {
    /// The minimiser, present only when it satisfies the inequality.
    pub best: Option<Vec<f64>>,
    pub closest: Vec<f64>,
    pub closest_max_eigenvalue: f64,
    pub candidates: usize,
    pub passed: bool,
}

/// Every vector with components in `{0, 0.25, 0.5, 1, 2, 4}` (capped at 6 subsystems;
/// larger networks get the uniform vectors only).
pub fn default_mu_candidates(n: usize) -> Vec<Vec<f64>> {
    const VALUES: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
    if n > 6 {
        return VALUES[1..].iter().map(|&v| vec![v; n]).collect();
    }
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                VALUES.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Scans `candidates` for the weights minimising `λ_max(Q(μ/‖μ‖₁))`, taking the
/// worst case over every supply list (e.g. flow and jump). Ties go to the
/// candidate with the smallest `‖μ‖₁`, then the lexicographically smallest.
pub fn search_mu(
    m: &DMatrix<f64>,
    d_lists: &[&[DMatrix<f64>]],
    dims: &[(usize, usize)],
    candidates: &[Vec<f64>],
    tol: f64,
) -> Result<MuSearchReport, CertificateError> {
    let mut ordered: Vec<&Vec<f64>> = candidates
        .iter()
        .filter(|c| c.iter().sum::<f64>() > 0.0)
        .collect();
    ordered.sort_by(|a, b| {
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        sa.total_cmp(&sb).then_with(|| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let score = |mu: &[f64]| -> Result<f64, CertificateError> {
        let mut worst = f64::NEG_INFINITY;
        for list in d_lists {
            worst = worst.max(max_eigenvalue(&assemble_q(m, list, dims, mu)?));
        }
        Ok(worst)
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for c in &ordered {
        let s: f64 = c.iter().sum();
        let normalised: Vec<f64> = c.iter().map(|v| v / s).collect();
        let e = score(&normalised)?;
        if best.as_ref().map_or(true, |(_, b)| e < b - 1e-12) {
            best = Some(((*c).clone(), e));
        }
    }
    let Some((closest, _)) = best else {
        return Ok(MuSearchReport {
            best: None,
            closest: Vec::new(),
            closest_max_eigenvalue: f64::INFINITY,
            candidates: 0,
            passed: false,
        });
    };
    let e = score(&closest)?;
    let passed = e <= tol;
    Ok(MuSearchReport {
        best: passed.then(|| closest.clone()),
        closest,
        closest_max_eigenvalue: e,
        candidates: ordered.len(),
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionViolation {
    pub state: Vec<f64>,
    pub image: Vec<f64>,
    pub subsystem: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub passed: bool,
    pub checked: usize,
    pub violation_count: usize,
    /// The first violations in enumeration order.
    pub violations: Vec<InclusionViolation>,
}

/// Enumerates every combined abstract state, maps it through `M` and checks
/// that each subsystem's share lands on its internal grid (within 1e-9).
pub fn check_input_inclusion(
    m: &DMatrix<f64>,
    state_grids: &[Grid],
    internal_grids: &[Grid],
    cap: usize,
) -> Result<InclusionReport, CertificateError> {
    let n_tot: usize = state_grids.iter().map(|g| g.dim()).sum();
    let q_tot: usize = internal_grids.iter().map(|g| g.dim()).sum();
    if m.shape() != (q_tot, n_tot) || state_grids.len() != internal_grids.len() {
        return Err(CertificateError::Dimension {
            what: "coupling matrix against the grids".into(),
            expected: q_tot * n_tot,
            got: m.nrows() * m.ncols(),
        });
    }
    let count = state_grids.iter().fold(1u128, |acc, g| acc.saturating_mul(g.len() as u128));
    if count > cap as u128 {
        return Err(CertificateError::CapExceeded { count, cap });
    }
    let count = count as usize;
    let (n_off, _) = offsets(state_grids.iter().map(|g| g.dim()));
    let (q_off, _) = offsets(internal_grids.iter().map(|g| g.dim()));
    let mut x = vec![0.0; n_tot];
    let mut image = vec![0.0; q_tot];
    let mut violations = Vec::new();
    let mut violation_count = 0;
    let mut idx = vec![0usize; state_grids.len()];
    for _ in 0..count {
        for (i, g) in state_grids.iter().enumerate() {
            g.point_into(idx[i], &mut x[n_off[i]..n_off[i] + g.dim()]);
        }
        crate::model::mat_vec(m, &x, &mut image);
        for (i, g) in internal_grids.iter().enumerate() {
            let part = &image[q_off[i]..q_off[i] + g.dim()];
            let inside = part
                .iter()
                .enumerate()
                .all(|(d, &v)| v >= g.bounds().lo(d) - INCLUSION_TOL && v <= g.bounds().hi(d) + INCLUSION_TOL);
            let reason = if !inside {
                Some("outside the internal input bounds")
            } else if g.locate(part, INCLUSION_TOL).is_none() {
                Some("not on the internal input lattice")
            } else {
                None
            };
            if let Some(reason) = reason {
                violation_count += 1;
                if violations.len() < LISTED_VIOLATIONS {
                    violations.push(InclusionViolation {
                        state: x.clone(),
                        image: image.clone(),
                        subsystem: i,
                        reason: reason.into(),
                    });
                }
            }
        }
        // last subsystem varies fastest
        for i in (0..idx.len()).rev() {
            idx[i] += 1;
            if idx[i] < state_grids[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok(InclusionReport {
        passed: violation_count == 0,
        checked: count,
        violation_count,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    pub sampling: SampleConfig,
    pub lmi_tol: f64,
    pub inclusion_cap: usize,
    /// Fixed weights; searched over `mu_candidates` when absent.
    pub mu: Option<Vec<f64>>,
    pub mu_candidates: Option<Vec<Vec<f64>>>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            sampling: SampleConfig::default(),
            lmi_tol: DEFAULT_LMI_TOL,
            inclusion_cap: DEFAULT_INCLUSION_CAP,
            mu: None,
            mu_candidates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemCertification {
    pub name: String,
    pub sandwich: CheckReport,
    pub flow_dissipativity: CheckReport,
    pub jump_dissipativity: CheckReport,
    pub triangle: CheckReport,
    pub dwell_time: Option<DwellReport>,
    pub dwell_error: Option<String>,
    pub simfn_case: Option<SimCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub seed: u64,
    pub subsystems: Vec<SubsystemCertification>,
    pub mu_search: Option<MuSearchReport>,
    pub mu: Vec<f64>,
    pub compositionality_flow: CompositionReport,
    pub compositionality_jump: CompositionReport,
    pub input_inclusion: Option<InclusionReport>,
    pub passed: bool,
    /// Names of failed conditions, prefixed by the subsystem where local.
    pub failed: Vec<String>,
}

fn sub_seed(seed: u64, subsystem: usize, check: u64) -> u64 {
    seed ^ (subsystem as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ check.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Runs every certificate and network check. Inclusion is skipped when no grids
/// are supplied.
pub fn certify_network(
    spec: &NetworkSpec,
    certs: &[Certificate],
    grids: Option<(&[Grid], &[Grid])>,
    opts: &CertifyOptions,
) -> Result<CertifyReport, CertificateError> {
    if certs.len() != spec.subsystems.len() {
        return Err(CertificateError::Count {
            expected: spec.subsystems.len(),
            got: certs.len(),
        });
    }
    let mut failed = Vec::new();
    let mut subsystems = Vec::with_capacity(certs.len());
    for (i, (sub, cert)) in spec.subsystems.iter().zip(certs).enumerate() {
        cert.validate(sub)?;
        let cfg = |k| SampleConfig {
            seed: sub_seed(opts.sampling.seed, i, k),
            ..opts.sampling
        };
        let sandwich = check_sandwich(cert, sub, &cfg(1));
        let flow = check_flow_dissipativity(cert, sub, &cfg(2));
        let jump = check_jump_dissipativity(cert, sub, &cfg(3));
        let triangle = check_triangle(cert, &sub.state_bounds.0, &cfg(4));
        let (dwell_time, dwell_error) = match check_dwell_time(cert.kappa_c, cert.kappa_d, sub.tau, sub.z_min, sub.z_max) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let simfn_case = SimCase::classify(cert.kappa_c, cert.kappa_d);
        for r in [&sandwich, &flow, &jump, &triangle] {
            if !r.passed {
                failed.push(format!("{}: {}", sub.name, r.check));
            }
        }
        if !dwell_time.as_ref().is_some_and(|d| d.passed) || simfn_case.is_none() {
            failed.push(format!("{}: dwell_time", sub.name));
        }
        subsystems.push(SubsystemCertification {
            name: sub.name.clone(),
            sandwich,
            flow_dissipativity: flow,
            jump_dissipativity: jump,
            triangle,
            dwell_time,
            dwell_error,
            simfn_case,
        });
    }

    let dims: Vec<(usize, usize)> = spec.subsystems.iter().map(|s| (s.q, s.n)).collect();
    let d_c: Vec<DMatrix<f64>> = certs.iter().map(|c| c.d_c.clone()).collect();
    let d_d: Vec<DMatrix<f64>> = certs.iter().map(|c| c.d_d.clone()).collect();
    let (mu, mu_search) = match &opts.mu {
        Some(mu) => (mu.clone(), None),
        None => {
            let candidates = opts
                .mu_candidates
                .clone()
                .unwrap_or_else(|| default_mu_candidates(certs.len()));
            let s = search_mu(&spec.coupling, &[&d_c, &d_d], &dims, &candidates, opts.lmi_tol)?;
            let mu = if s.closest.is_empty() {
                vec![1.0; certs.len()]
            } else {
                s.closest.clone()
            };
            (mu, Some(s))
        }
    };
    let compositionality_flow = check_compositionality(&spec.coupling, &d_c, &dims, &mu, opts.lmi_tol)?;
    let compositionality_jump = check_compositionality(&spec.coupling, &d_d, &dims, &mu, opts.lmi_tol)?;
    if !compositionality_flow.passed {
        failed.push("compositionality_lmi (flow supply)".into());
    }
    if !compositionality_jump.passed {
        failed.push("compositionality_lmi (jump supply)".into());
    }
    let input_inclusion = match grids {
        Some((xs, ws)) => {
            let r = check_input_inclusion(&spec.coupling, xs, ws, opts.inclusion_cap)?;
            if !r.passed {
                failed.push("input_inclusion".into());
            }
            Some(r)
        }
        None => None,
    };
    Ok(CertifyReport {
        seed: opts.sampling.seed,
        subsystems,
        mu_search,
        mu,
        compositionality_flow,
        compositionality_jump,
        input_inclusion,
        passed: failed.is_empty(),
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxSet;

    fn d(d11: f64, d12: f64, d22: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[d11, d12, d12, d22])
    }

    #[test]
    fn single_uncoupled() {
        let m = DMatrix::zeros(1, 1);
        let r = check_compositionality(&m, &[d(0.0, 0.0, -1.0)], &[(1, 1)], &[1.0], DEFAULT_LMI_TOL).unwrap();
        assert!(r.passed && r.max_eigenvalue == -1.0);
        let r = check_compositionality(&m, &[d(0.0, 0.0, 1.0)], &[(1, 1)], &[1.0], DEFAULT_LMI_TOL).unwrap();
        assert!(!r.passed && r.max_eigenvalue == 1.0);
        assert!(check_compositionality(&m, &[d(0.0, 0.0, -1.0)], &[(1, 1)], &[-1.0], DEFAULT_LMI_TOL).is_err());
    }

    #[test]
    fn cross_coupled_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ds = [d(0.0, 0.5, -1.0), d(0.0, 0.5, -1.0)];
        let r = check_compositionality(&m, &ds, &[(1, 1), (1, 1)], &[1.0, 1.0], DEFAULT_LMI_TOL).unwrap();
        assert_eq!(r.q, vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);
        assert!(r.passed);
        assert!((r.eigenvalues[0] - 0.0).abs() < 1e-10 && (r.eigenvalues[1] + 2.0).abs() < 1e-10);
        let s = search_mu(&m, &[&ds], &[(1, 1), (1, 1)], &default_mu_candidates(2), DEFAULT_LMI_TOL).unwrap();
        assert_eq!(s.best, Some(vec![0.25, 0.25]));
        let bad = [d(1.0, 1.0, 1.0), d(1.0, 1.0, 1.0)];
        let s = search_mu(&m, &[&bad], &[(1, 1), (1, 1)], &default_mu_candidates(2), DEFAULT_LMI_TOL).unwrap();
        assert!(s.best.is_none() && !s.passed);
    }

    #[test]
    fn uncoupled_mu_tie_break() {
        let m = DMatrix::zeros(1, 1);
        let s = search_mu(&m, &[&[d(0.0, 0.0, -1.0)]], &[(1, 1)], &default_mu_candidates(1), DEFAULT_LMI_TOL).unwrap();
        assert_eq!(s.best, Some(vec![0.25]));
    }

    #[test]
    fn inclusion_identity_and_third() {
        let g = |eta| Grid::new(BoxSet(vec![[0.0, 1.0]]), eta).unwrap();
        let id = DMatrix::from_element(1, 1, 1.0);
        let r = check_input_inclusion(&id, &[g(0.1)], &[g(0.1)], DEFAULT_INCLUSION_CAP).unwrap();
        assert!(r.passed && r.checked == 11);
        let third = DMatrix::from_element(1, 1, 1.0 / 3.0);
        let r = check_input_inclusion(&third, &[g(0.1)], &[g(0.1)], DEFAULT_INCLUSION_CAP).unwrap();
        assert!(!r.passed);
        assert_eq!(r.violations[0].reason, "not on the internal input lattice");
        let two = DMatrix::from_element(1, 1, 2.0);
        let r = check_input_inclusion(&two, &[g(0.1)], &[g(0.1)], DEFAULT_INCLUSION_CAP).unwrap();
        assert_eq!(r.violation_count, 5);
        assert!(r.violations.iter().all(|v| v.reason == "outside the internal input bounds"));
        assert!(matches!(
            check_input_inclusion(&id, &[g(0.1)], &[g(0.1)], 5),
            Err(CertificateError::CapExceeded { .. })
        ));
    }
}
