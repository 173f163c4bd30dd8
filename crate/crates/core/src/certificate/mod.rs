//! Dissipativity certificates and their checks.
//!
//! A certificate file is TOML with one `[[certificate]]` table per subsystem,
//! in the order of the system file:
//!
//! ```toml
//! format_version = 1
//!
//! [[certificate]]
//! storage = "(x1 - xh1)^2"       # V(x, xh)
//! alpha_lower = [[1.0, 2.0]]     # K∞ terms [a, p] meaning a·r^p, summed
//! alpha_upper = [[1.0, 2.0]]
//! kappa_c = 0.5
//! kappa_d = 0.25
//! d_c = [0.0, 0.5, 0.5, -1.0]    # row-major (q+n)×(q+n), ω block first
//! d_d = [0.0, 0.0, 0.0, 0.0]
//! rho_uc = [[2.0, 2.0]]          # [] is the zero gain
//! rho_ud = []
//! gamma_hat = [[2.0, 1.0], [1.0, 2.0]]
//! epsilon = 0.5                  # optional, used when κ_d ≥ 1
//! delta = 3.0                    # optional, default z_max + 1
//! ```
//!
//! All norms are infinity norms. The sampled checks are falsification tests:
//! a pass means no sample (after local refinement) violated the inequality.

mod kinf;
mod network;
mod sampling;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::dsl::{Bindings, DslError, DynamicsExpr, VarKind};
use crate::model::{line_of, NetworkSpec, SubsystemSpec};

pub use kinf::KInfFn;
pub use network::{
    certify_network, check_compositionality, check_input_inclusion, default_mu_candidates, search_mu,
    CertifyOptions, CertifyReport, CompositionReport, InclusionReport, InclusionViolation, MuSearchReport,
    SubsystemCertification, DEFAULT_INCLUSION_CAP, DEFAULT_LMI_TOL,
};
pub use sampling::{sampled_check, to_box, CheckReport, Eval, Halton, SampleConfig, Witness, SAMPLE_TOL};

pub const CERTIFICATE_FORMAT_VERSION: u32 = 1;
/// Central finite-difference step for gradients of the storage function.
pub const GRADIENT_STEP: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: certificate {index}: {message}")]
    Schema { line: usize, index: usize, message: String },
    #[error("unsupported certificate format version {0} (expected {CERTIFICATE_FORMAT_VERSION})")]
    Version(u32),
    #[error("{got} certificates for {expected} subsystems")]
    Count { expected: usize, got: usize },
    #[error("invalid gain: {0}")]
    KInf(String),
    #[error("{which} is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { which: String, asymmetry: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("kappa_d must be positive for the dwell-time condition, got {0}")]
    DwellDomain(f64),
    #[error("no simulation-function case for kappa_c = {kappa_c}, kappa_d = {kappa_d} (kappa_d >= 1 needs kappa_c > 0)")]
    NoCase { kappa_c: f64, kappa_d: f64 },
    #[error("epsilon must lie in (0, 1), got {0}")]
    Epsilon(f64),
    #[error("delta must exceed z_max = {z_max}, got {delta}")]
    Delta { delta: f64, z_max: u32 },
    #[error("negative weight mu[{index}] = {value}")]
    NegativeMu { index: usize, value: f64 },
    #[error("{count} combined grid points exceed the cap of {cap}; coarsen the grids for this check or raise the cap")]
    CapExceeded { count: u128, cap: usize },
    #[error("oracle precondition: {0}")]
    Oracle(String),
    #[error(transparent)]
    Dsl(#[from] DslError),
}

/// Storage function plus the constants of the flow/jump dissipation inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub storage: DynamicsExpr,
    pub alpha_lower: KInfFn,
    pub alpha_upper: KInfFn,
    pub kappa_c: f64,
    pub kappa_d: f64,
    pub d_c: DMatrix<f64>,
    pub d_d: DMatrix<f64>,
    pub rho_uc: KInfFn,
    pub rho_ud: KInfFn,
    pub gamma_hat: KInfFn,
    pub epsilon: f64,
    pub delta: Option<f64>,
}

impl Certificate {
    /// `V(x, xh)`.
    pub fn storage_value(&self, x: &[f64], xh: &[f64]) -> Result<f64, DslError> {
        Ok(self.storage.eval(&Bindings::pair(x, xh))?)
    }

    /// Checks dimensions and the structural invariants against one subsystem.
    pub fn validate(&self, spec: &SubsystemSpec) -> Result<(), CertificateError> {
        self.storage.check_vars(|k| match k {
            VarKind::X | VarKind::Xh => Some(spec.n),
            _ => None,
        })?;
        let size = spec.q + spec.n;
        for (which, d) in [("d_c", &self.d_c), ("d_d", &self.d_d)] {
            if d.nrows() != size || d.ncols() != size {
                return Err(CertificateError::Dimension {
                    what: which.into(),
                    expected: size,
                    got: d.nrows().max(d.ncols()),
                });
            }
            let asym = asymmetry(d);
            if asym > SYMMETRY_TOL * (1.0 + d.amax()) {
                return Err(CertificateError::NotSymmetric {
                    which: which.into(),
                    asymmetry: asym,
                });
            }
        }
        if self.alpha_lower.is_zero() || self.alpha_upper.is_zero() {
            return Err(CertificateError::KInf("alpha_lower and alpha_upper must be nonzero".into()));
        }
        if self.gamma_hat.is_zero() {
            return Err(CertificateError::KInf("gamma_hat must be nonzero".into()));
        }
        if !(self.kappa_d >= 0.0) || !self.kappa_d.is_finite() || !self.kappa_c.is_finite() {
            return Err(CertificateError::KInf(format!(
                "kappa_c = {}, kappa_d = {}: need finite values with kappa_d >= 0",
                self.kappa_c, self.kappa_d
            )));
        }
        Ok(())
    }

    /// Supply `[Δω; Δx]ᵀ D [Δω; Δx]`.
    pub fn supply(d: &DMatrix<f64>, dw: &[f64], dx: &[f64]) -> f64 {
        let v: Vec<f64> = dw.iter().chain(dx).copied().collect();
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += v[i] * d[(i, j)] * v[j];
            }
        }
        s
    }
}

pub(crate) fn asymmetry(d: &DMatrix<f64>) -> f64 {
    if d.nrows() != d.ncols() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..d.nrows() {
        for j in 0..i {
            worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
        }
    }
    worst
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertFile {
    format_version: Spanned<u32>,
    certificate: Vec<Spanned<RawCert>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCert {
    storage: Spanned<String>,
    alpha_lower: Spanned<Vec<[f64; 2]>>,
    alpha_upper: Spanned<Vec<[f64; 2]>>,
    kappa_c: f64,
    kappa_d: f64,
    d_c: Spanned<Vec<f64>>,
    d_d: Spanned<Vec<f64>>,
    #[serde(default)]
    rho_uc: Option<Spanned<Vec<[f64; 2]>>>,
    #[serde(default)]
    rho_ud: Option<Spanned<Vec<[f64; 2]>>>,
    gamma_hat: Spanned<Vec<[f64; 2]>>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default)]
    delta: Option<f64>,
}

fn default_epsilon() -> f64 {
    0.5
}

/// Parses a certificate file and validates each entry against its subsystem.
pub fn parse_certificates(text: &str, spec: &NetworkSpec) -> Result<Vec<Certificate>, CertificateError> {
    let raw: RawCertFile = toml::from_str(text).map_err(|e| CertificateError::Syntax {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    if *raw.format_version.get_ref() != CERTIFICATE_FORMAT_VERSION {
        return Err(CertificateError::Version(*raw.format_version.get_ref()));
    }
    if raw.certificate.len() != spec.subsystems.len() {
        return Err(CertificateError::Count {
            expected: spec.subsystems.len(),
            got: raw.certificate.len(),
        });
    }
    let mut out = Vec::with_capacity(raw.certificate.len());
    for (index, (rc, sub)) in raw.certificate.iter().zip(&spec.subsystems).enumerate() {
        let block_line = line_of(text, rc.span().start);
        let rc = rc.get_ref();
        let at = |span: std::ops::Range<usize>, message: String| CertificateError::Schema {
            line: line_of(text, span.start),
            index,
            message,
        };
        let storage = DynamicsExpr::parse(rc.storage.get_ref())
            .map_err(|e| at(rc.storage.span(), format!("storage expression: {e}")))?;
        let kinf = |s: &Spanned<Vec<[f64; 2]>>, name: &str| {
            KInfFn::new(s.get_ref().clone()).map_err(|e| at(s.span(), format!("{name}: {e}")))
        };
        let opt_kinf = |s: &Option<Spanned<Vec<[f64; 2]>>>, name: &str| match s {
            Some(s) => kinf(s, name),
            None => Ok(KInfFn::zero()),
        };
        let size = sub.q + sub.n;
        let matrix = |s: &Spanned<Vec<f64>>, name: &str| {
            if s.get_ref().len() != size * size {
                return Err(at(
                    s.span(),
                    format!("{name} needs {} entries ((q+n)^2 with q+n = {size}), found {}", size * size, s.get_ref().len()),
                ));
            }
            Ok(DMatrix::from_row_slice(size, size, s.get_ref()))
        };
        let cert = Certificate {
            storage,
            alpha_lower: kinf(&rc.alpha_lower, "alpha_lower")?,
            alpha_upper: kinf(&rc.alpha_upper, "alpha_upper")?,
            kappa_c: rc.kappa_c,
            kappa_d: rc.kappa_d,
            d_c: matrix(&rc.d_c, "d_c")?,
            d_d: matrix(&rc.d_d, "d_d")?,
            rho_uc: opt_kinf(&rc.rho_uc, "rho_uc")?,
            rho_ud: opt_kinf(&rc.rho_ud, "rho_ud")?,
            gamma_hat: kinf(&rc.gamma_hat, "gamma_hat")?,
            epsilon: rc.epsilon,
            delta: rc.delta,
        };
        cert.validate(sub).map_err(|e| CertificateError::Schema {
            line: block_line,
            index,
            message: e.to_string(),
        })?;
        out.push(cert);
    }
    Ok(out)
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn named(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
}

/// Lower/upper sandwich `α̲(‖x−x̂‖) ≤ V(x,x̂) ≤ ᾱ(‖x−x̂‖)` on pairs from the state box.
pub fn check_sandwich(cert: &Certificate, spec: &SubsystemSpec, cfg: &SampleConfig) -> CheckReport {
    let n = spec.n;
    let b = &spec.state_bounds.0;
    let split = |p: &[f64]| {
        let mut x = vec![0.0; n];
        let mut xh = vec![0.0; n];
        to_box(&p[..n], b, &mut x);
        to_box(&p[n..], b, &mut xh);
        (x, xh)
    };
    sampled_check(
        "sandwich",
        2 * n,
        cfg,
        |p| {
            let (x, xh) = split(p);
            sandwich_margin(cert, &x, &xh)
        },
        |p| {
            let (x, xh) = split(p);
            named(&[("x", &x), ("xh", &xh)])
        },
    )
}

/// Smaller of the two sandwich margins at one pair.
pub fn sandwich_margin(cert: &Certificate, x: &[f64], xh: &[f64]) -> Option<Eval> {
    let v = cert.storage_value(x, xh).ok()?;
    let r = inf_norm_diff(x, xh);
    let (lo, hi) = (cert.alpha_lower.eval(r), cert.alpha_upper.eval(r));
    Some(Eval {
        margin: (v - lo).min(hi - v),
        scale: v.abs() + lo + hi,
        size: sq_norm_diff(x, xh),
    })
}

/// One sample of the flow/jump checks.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x: Vec<f64>,
    pub xh: Vec<f64>,
    pub w: Vec<f64>,
    pub wh: Vec<f64>,
    pub u: Vec<f64>,
    pub uh: Vec<f64>,
}

impl PairSample {
    fn from_unit(spec: &SubsystemSpec, p: &[f64]) -> Self {
        let (n, q, m) = (spec.n, spec.q, spec.m);
        let mut s = PairSample {
            x: vec![0.0; n],
            xh: vec![0.0; n],
            w: vec![0.0; q],
            wh: vec![0.0; q],
            u: vec![0.0; m],
            uh: vec![0.0; m],
        };
        let mut o = 0;
        for (dst, bounds) in [
            (&mut s.x, &spec.state_bounds),
            (&mut s.xh, &spec.state_bounds),
            (&mut s.w, &spec.internal_bounds),
            (&mut s.wh, &spec.internal_bounds),
            (&mut s.u, &spec.external_bounds),
            (&mut s.uh, &spec.external_bounds),
        ] {
            let k = dst.len();
            to_box(&p[o..o + k], &bounds.0, dst);
            o += k;
        }
        s
    }

    fn named(&self) -> BTreeMap<String, Vec<f64>> {
        named(&[
            ("x", &self.x),
            ("xh", &self.xh),
            ("w", &self.w),
            ("wh", &self.wh),
            ("u", &self.u),
            ("uh", &self.uh),
        ])
    }

    fn dims(spec: &SubsystemSpec) -> usize {
        2 * (spec.n + spec.q + spec.m)
    }
}

/// Gradients of `V` with respect to `x` and `xh` by central differences.
pub fn storage_gradient(cert: &Certificate, x: &[f64], xh: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DslError> {
    let h = GRADIENT_STEP;
    let mut gx = vec![0.0; x.len()];
    let mut gxh = vec![0.0; xh.len()];
    let mut xp = x.to_vec();
    let mut xhp = xh.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let a = cert.storage_value(&xp, xh)?;
        xp[k] = x[k] - h;
        let b = cert.storage_value(&xp, xh)?;
        xp[k] = x[k];
        gx[k] = (a - b) / (2.0 * h);
    }
    for k in 0..xh.len() {
        xhp[k] = xh[k] + h;
        let a = cert.storage_value(x, &xhp)?;
        xhp[k] = xh[k] - h;
        let b = cert.storage_value(x, &xhp)?;
        xhp[k] = xh[k];
        gxh[k] = (a - b) / (2.0 * h);
    }
    Ok((gx, gxh))
}

/// Flow dissipation margin at one sample:
/// `−κ_c V + supply(D_c) + ρ_uc(‖u−û‖) − (∇ₓV·f(x,ω,u) + ∇ₓ̂V·f(x̂,ω̂,û))`.
pub fn flow_margin(cert: &Certificate, spec: &SubsystemSpec, s: &PairSample) -> Option<Eval> {
    let v = cert.storage_value(&s.x, &s.xh).ok()?;
    let (gx, gxh) = storage_gradient(cert, &s.x, &s.xh).ok()?;
    let mut fx = vec![0.0; spec.n];
    let mut fxh = vec![0.0; spec.n];
    spec.flow.eval_into(&s.x, &s.w, &s.u, &mut fx).ok()?;
    spec.flow.eval_into(&s.xh, &s.wh, &s.uh, &mut fxh).ok()?;
    let lhs: f64 = gx.iter().zip(&fx).map(|(a, b)| a * b).sum::<f64>() + gxh.iter().zip(&fxh).map(|(a, b)| a * b).sum::<f64>();
    let dw: Vec<f64> = s.w.iter().zip(&s.wh).map(|(a, b)| a - b).collect();
    let dx: Vec<f64> = s.x.iter().zip(&s.xh).map(|(a, b)| a - b).collect();
    let supply = Certificate::supply(&cert.d_c, &dw, &dx);
    let rho = cert.rho_uc.eval(inf_norm_diff(&s.u, &s.uh));
    let decay = -cert.kappa_c * v;
    Some(Eval {
        margin: decay + supply + rho - lhs,
        scale: lhs.abs() + decay.abs() + supply.abs() + rho,
        size: sq_norm_diff(&s.x, &s.xh) + sq_norm_diff(&s.w, &s.wh) + sq_norm_diff(&s.u, &s.uh),
    })
}

/// Jump dissipation margin at one sample:
/// `κ_d V + supply(D_d) + ρ_ud(‖u−û‖) − V(g(x,ω,u), g(x̂,ω̂,û))`.
pub fn jump_margin(cert: &Certificate, spec: &SubsystemSpec, s: &PairSample) -> Option<Eval> {
    let v = cert.storage_value(&s.x, &s.xh).ok()?;
    let mut gx = vec![0.0; spec.n];
    let mut gxh = vec![0.0; spec.n];
    spec.jump.eval_into(&s.x, &s.w, &s.u, &mut gx).ok()?;
    spec.jump.eval_into(&s.xh, &s.wh, &s.uh, &mut gxh).ok()?;
    let after = cert.storage_value(&gx, &gxh).ok()?;
    let dw: Vec<f64> = s.w.iter().zip(&s.wh).map(|(a, b)| a - b).collect();
    let dx: Vec<f64> = s.x.iter().zip(&s.xh).map(|(a, b)| a - b).collect();
    let supply = Certificate::supply(&cert.d_d, &dw, &dx);
    let rho = cert.rho_ud.eval(inf_norm_diff(&s.u, &s.uh));
    let bound = cert.kappa_d * v;
    Some(Eval {
        margin: bound + supply + rho - after,
        scale: bound.abs() + supply.abs() + rho + after.abs(),
        size: sq_norm_diff(&s.x, &s.xh) + sq_norm_diff(&s.w, &s.wh) + sq_norm_diff(&s.u, &s.uh),
    })
}

pub fn check_flow_dissipativity(cert: &Certificate, spec: &SubsystemSpec, cfg: &SampleConfig) -> CheckReport {
    sampled_check(
        "flow_dissipativity",
        PairSample::dims(spec),
        cfg,
        |p| flow_margin(cert, spec, &PairSample::from_unit(spec, p)),
        |p| PairSample::from_unit(spec, p).named(),
    )
}

pub fn check_jump_dissipativity(cert: &Certificate, spec: &SubsystemSpec, cfg: &SampleConfig) -> CheckReport {
    sampled_check(
        "jump_dissipativity",
        PairSample::dims(spec),
        cfg,
        |p| jump_margin(cert, spec, &PairSample::from_unit(spec, p)),
        |p| PairSample::from_unit(spec, p).named(),
    )
}

/// Triangle-type bound `V(x,y) ≤ V(x,z) + γ̂(‖y−z‖)` on triples from `bounds`.
pub fn check_triangle(cert: &Certificate, bounds: &[[f64; 2]], cfg: &SampleConfig) -> CheckReport {
    let n = bounds.len();
    let split = |p: &[f64]| {
        let mut v = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (k, part) in v.iter_mut().enumerate() {
            to_box(&p[k * n..(k + 1) * n], bounds, part);
        }
        v
    };
    sampled_check(
        "triangle",
        3 * n,
        cfg,
        |p| {
            let [x, y, z] = split(p);
            triangle_margin(cert, &x, &y, &z)
        },
        |p| {
            let [x, y, z] = split(p);
            named(&[("x", &x), ("y", &y), ("z", &z)])
        },
    )
}

pub fn triangle_margin(cert: &Certificate, x: &[f64], y: &[f64], z: &[f64]) -> Option<Eval> {
    let vxy = cert.storage_value(x, y).ok()?;
    let vxz = cert.storage_value(x, z).ok()?;
    let g = cert.gamma_hat.eval(inf_norm_diff(y, z));
    Some(Eval {
        margin: vxz + g - vxy,
        scale: vxy.abs() + vxz.abs() + g,
        size: sq_norm_diff(y, z),
    })
}

/// Exact verdict of the flow inequality for `V = ΔxᵀPΔx` and linear dynamics
/// `ẋ = Ax + B_w ω + B_u u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub holds: bool,
    pub max_eigenvalue: f64,
}

/// Reduces the flow inequality to `vᵀSv ≤ 0` for `v = (Δω, Δx[, Δu])` and decides it
/// by the largest eigenvalue of `S`. The input gain must be zero, or quadratic
/// (`c·r²`) with a scalar input.
#[allow(clippy::too_many_arguments)]
pub fn quadratic_oracle(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    kappa_c: f64,
    d_c: &DMatrix<f64>,
    rho_uc: &KInfFn,
) -> Result<OracleVerdict, CertificateError> {
    let n = p.nrows();
    if p.ncols() != n || asymmetry(p) > SYMMETRY_TOL * (1.0 + p.amax()) {
        return Err(CertificateError::Oracle("P must be square and symmetric".into()));
    }
    let q = b_w.ncols();
    let m = b_u.ncols();
    if a.shape() != (n, n) || b_w.nrows() != n || b_u.nrows() != n || d_c.shape() != (q + n, q + n) {
        return Err(CertificateError::Oracle("inconsistent matrix shapes".into()));
    }
    let input_block = b_u.amax() > 0.0;
    let c_u = if input_block {
        match (m, rho_uc.single_term()) {
            (1, Some((c, p))) if p == 2.0 => c,
            (1, None) if rho_uc.is_zero() => 0.0,
            _ => return Err(CertificateError::Oracle("B_u != 0 needs a scalar input and rho_uc = c*r^2".into())),
        }
    } else {
        0.0
    };
    let size = q + n + if input_block { 1 } else { 0 };
    let mut s = DMatrix::zeros(size, size);
    let d11 = d_c.view((0, 0), (q, q));
    let d12 = d_c.view((0, q), (q, n));
    let d22 = d_c.view((q, q), (n, n));
    s.view_mut((0, 0), (q, q)).copy_from(&(-d11));
    let swx = b_w.transpose() * p - d12;
    s.view_mut((0, q), (q, n)).copy_from(&swx);
    s.view_mut((q, 0), (n, q)).copy_from(&swx.transpose());
    let sxx = p * a + a.transpose() * p + p * kappa_c - d22;
    s.view_mut((q, q), (n, n)).copy_from(&sxx);
    if input_block {
        let sxu = p * b_u;
        s.view_mut((q, q + n), (n, 1)).copy_from(&sxu);
        s.view_mut((q + n, q), (1, n)).copy_from(&sxu.transpose());
        s[(q + n, q + n)] = -c_u;
    }
    let s = (&s + s.transpose()) * 0.5;
    let max_eigenvalue = if size == 0 {
        f64::NEG_INFINITY
    } else {
        s.symmetric_eigenvalues().max()
    };
    Ok(OracleVerdict {
        holds: max_eigenvalue <= 0.0,
        max_eigenvalue,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellReport {
    pub passed: bool,
    /// `ln κ_d − κ_c τ z_min`
    pub margin_at_z_min: f64,
    /// `ln κ_d − κ_c τ z_max`
    pub margin_at_z_max: f64,
}

/// `ln κ_d − κ_c τ c < 0` at both ends of the dwell range.
pub fn check_dwell_time(kappa_c: f64, kappa_d: f64, tau: f64, z_min: u32, z_max: u32) -> Result<DwellReport, CertificateError> {
    if !(kappa_d > 0.0) {
        return Err(CertificateError::DwellDomain(kappa_d));
    }
    let at = |c: u32| kappa_d.ln() - kappa_c * tau * c as f64;
    let (lo, hi) = (at(z_min), at(z_max));
    Ok(DwellReport {
        passed: lo < 0.0 && hi < 0.0,
        margin_at_z_min: lo,
        margin_at_z_max: hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimCase {
    /// `κ_d < 1`, `κ_c > 0`: `𝒱 = V`.
    A,
    /// `κ_d ≥ 1`, `κ_c > 0`: `𝒱 = V·e^{κ_c τ ε c}`.
    B,
    /// `κ_d < 1`, `κ_c ≤ 0`: `𝒱 = V·κ_d^{c/δ}`.
    C,
}

impl SimCase {
    pub fn classify(kappa_c: f64, kappa_d: f64) -> Option<SimCase> {
        match (kappa_d < 1.0, kappa_c > 0.0) {
            (true, true) => Some(SimCase::A),
            (false, true) => Some(SimCase::B),
            (true, false) => Some(SimCase::C),
            (false, false) => None,
        }
    }
}

/// Counter-weighted storage function `𝒱((x,c),(x̂,c)) = w(c)·V(x,x̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSimFn {
    pub cert: Certificate,
    pub case: SimCase,
    pub epsilon: f64,
    pub delta: f64,
    pub tau: f64,
    pub z_max: u32,
    /// State dimension the storage function is evaluated on.
    pub n: usize,
}

pub fn build_local_simfn(cert: &Certificate, epsilon: f64, delta: f64, z_max: u32, tau: f64) -> Result<LocalSimFn, CertificateError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CertificateError::Epsilon(epsilon));
    }
    if !(delta > z_max as f64) {
        return Err(CertificateError::Delta { delta, z_max });
    }
    let case = SimCase::classify(cert.kappa_c, cert.kappa_d).ok_or(CertificateError::NoCase {
        kappa_c: cert.kappa_c,
        kappa_d: cert.kappa_d,
    })?;
    let n = cert
        .storage
        .referenced_vars()
        .iter()
        .filter(|v| matches!(v.kind, VarKind::X | VarKind::Xh))
        .map(|v| v.index)
        .max()
        .unwrap_or(0);
    Ok(LocalSimFn {
        cert: cert.clone(),
        case,
        epsilon,
        delta,
        tau,
        z_max,
        n,
    })
}

impl LocalSimFn {
    /// Builds from the certificate's own `epsilon` and `delta` (default `z_max + 1`).
    pub fn from_certificate(cert: &Certificate, spec: &SubsystemSpec) -> Result<Self, CertificateError> {
        let delta = cert.delta.unwrap_or(spec.z_max as f64 + 1.0);
        let mut f = build_local_simfn(cert, cert.epsilon, delta, spec.z_max, spec.tau)?;
        f.n = spec.n;
        Ok(f)
    }

    pub fn cert_dim(&self) -> usize {
        self.n
    }

    /// Weight `w(c)` multiplying `V`.
    pub fn multiplier(&self, c: u32) -> f64 {
        let c = c as f64;
        match self.case {
            SimCase::A => 1.0,
            SimCase::B => (self.cert.kappa_c * self.tau * self.epsilon * c).exp(),
            SimCase::C => self.cert.kappa_d.powf(c / self.delta),
        }
    }

    pub fn eval(&self, x: &[f64], xh: &[f64], c: u32) -> Result<f64, DslError> {
        Ok(self.multiplier(c) * self.cert.storage_value(x, xh)?)
    }

    /// Smallest weight over the counters `0..=z_max`.
    pub fn min_multiplier(&self) -> f64 {
        (0..=self.z_max).map(|c| self.multiplier(c)).fold(f64::INFINITY, f64::min)
    }

    /// Lower bound `α(‖x−x̂‖) ≤ 𝒱` valid at every counter.
    pub fn condition1_alpha(&self) -> Result<KInfFn, CertificateError> {
        let s = self.min_multiplier();
        if !(s > 0.0) {
            return Err(CertificateError::KInf("simulation function weight vanishes at some counter".into()));
        }
        self.cert.alpha_lower.scaled(s)
    }
}
