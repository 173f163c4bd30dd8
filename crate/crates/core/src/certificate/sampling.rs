//! Low-discrepancy sampling and the generic falsification loop behind the
//! sampled certificate checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Margins below `-SAMPLE_TOL·(1 + scale)` count as violations; `scale` is the
/// sum of magnitudes of the terms in the inequality.
pub const SAMPLE_TOL: f64 = 1e-8;
const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub samples: usize,
    pub seed: u64,
    /// How many of the most critical samples get a local pattern search.
    pub refine: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            samples: 4096,
            seed: 0,
            refine: 8,
        }
    }
}

/// Randomly shifted Halton points in `[0, 1)^dims`.
#[derive(Debug, Clone)]
pub struct Halton {
    bases: Vec<u64>,
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dims: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Halton {
            bases: primes(dims),
            shift: (0..dims).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn point_into(&self, index: usize, out: &mut [f64]) {
        for ((o, &b), &s) in out.iter_mut().zip(&self.bases).zip(&self.shift) {
            let v = radical_inverse(index as u64 + 1, b) + s;
            *o = v - v.floor();
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn primes(k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(k);
    let mut c = 2u64;
    while out.len() < k {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Outcome of one inequality at one sample.
#[derive(Debug, Clone, Copy)]
pub struct Eval {
    /// Right-hand side minus left-hand side; negative means violated.
    pub margin: f64,
    pub scale: f64,
    /// Squared size of the deviation, used to normalise the margin during refinement.
    pub size: f64,
}

impl Eval {
    fn violated(&self) -> bool {
        self.margin < -SAMPLE_TOL * (1.0 + self.scale)
    }

    fn normalised(&self) -> Option<f64> {
        (self.size > 1e-18).then(|| self.margin / self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub margin: f64,
    pub values: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    pub samples: usize,
    pub refined: usize,
    pub skipped: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub witness: Option<Witness>,
}

#[derive(Default)]
struct BatchSummary {
    skipped: usize,
    violations: usize,
    worst: Option<(f64, usize)>,
    worst_violation: Option<(f64, usize)>,
    critical: Vec<(f64, usize)>,
}

fn better(a: Option<(f64, usize)>, b: (f64, usize)) -> Option<(f64, usize)> {
    match a {
        Some(x) if x.0 <= b.0 => Some(x),
        _ => Some(b),
    }
}

/// Runs `eval` on `cfg.samples` Halton points of dimension `dims`, refines the
/// most critical ones by pattern search, and summarises the worst margin.
/// Results do not depend on the number of worker threads.
pub fn sampled_check<E, D>(name: &str, dims: usize, cfg: &SampleConfig, eval: E, decode: D) -> CheckReport
where
    E: Fn(&[f64]) -> Option<Eval> + Sync,
    D: Fn(&[f64]) -> BTreeMap<String, Vec<f64>>,
{
    let halton = Halton::new(dims, cfg.seed);
    let batches = cfg.samples.div_ceil(BATCH);
    let keep = cfg.refine;
    let summaries: Vec<BatchSummary> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut s = BatchSummary::default();
            let mut p = vec![0.0; dims];
            for i in b * BATCH..((b + 1) * BATCH).min(cfg.samples) {
                halton.point_into(i, &mut p);
                let Some(e) = eval(&p) else {
                    s.skipped += 1;
                    continue;
                };
                if !e.margin.is_finite() {
                    s.skipped += 1;
                    continue;
                }
                s.worst = better(s.worst, (e.margin, i));
                if e.violated() {
                    s.violations += 1;
                    s.worst_violation = better(s.worst_violation, (e.margin, i));
                }
                if let Some(n) = e.normalised() {
                    s.critical.push((n, i));
                }
            }
            s.critical.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            s.critical.truncate(keep);
            s
        })
        .collect();

    let mut total = BatchSummary::default();
    for s in summaries {
        total.skipped += s.skipped;
        total.violations += s.violations;
        if let Some(w) = s.worst {
            total.worst = better(total.worst, w);
        }
        if let Some(w) = s.worst_violation {
            total.worst_violation = better(total.worst_violation, w);
        }
        total.critical.extend(s.critical);
    }
    total.critical.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    total.critical.truncate(keep);

    let mut worst_margin = total.worst.map(|w| w.0).unwrap_or(f64::INFINITY);
    let mut witness_point = total.worst_violation.map(|(m, i)| {
        let mut p = vec![0.0; dims];
        halton.point_into(i, &mut p);
        (m, p)
    });
    let starts: Vec<Vec<f64>> = total
        .critical
        .iter()
        .map(|&(_, i)| {
            let mut p = vec![0.0; dims];
            halton.point_into(i, &mut p);
            p
        })
        .collect();
    let refined: Vec<Option<(Vec<f64>, Eval)>> = starts.into_par_iter().map(|p| refine(p, &eval)).collect();
    let mut refined_count = 0;
    for (p, e) in refined.into_iter().flatten() {
        refined_count += 1;
        worst_margin = worst_margin.min(e.margin);
        if e.violated() {
            total.violations += 1;
            if witness_point.as_ref().map_or(true, |(m, _)| e.margin < *m) {
                witness_point = Some((e.margin, p));
            }
        }
    }
    let witness = witness_point.map(|(margin, p)| Witness {
        margin,
        values: decode(&p),
    });
    CheckReport {
        check: name.to_string(),
        passed: total.violations == 0,
        samples: cfg.samples,
        refined: refined_count,
        skipped: total.skipped,
        violations: total.violations,
        worst_margin,
        witness,
    }
}

/// Coordinate pattern search inside the unit cube: first on the normalised
/// margin (finds the worst direction), then on the raw margin (grows it).
fn refine<E>(start: Vec<f64>, eval: &E) -> Option<(Vec<f64>, Eval)>
where
    E: Fn(&[f64]) -> Option<Eval>,
{
    let first = eval(&start)?;
    let mut best = (start, first);
    for phase in 0..2 {
        let objective = |e: &Eval| if phase == 0 { e.normalised() } else { Some(e.margin) };
        let Some(mut bo) = objective(&best.1) else {
            continue;
        };
        let mut step = 0.125;
        let mut sweeps = 0;
        while step > 1e-5 && sweeps < 400 {
            sweeps += 1;
            let mut improved = false;
            for d in 0..best.0.len() {
                for sign in [1.0, -1.0] {
                    let mut cand = best.0.clone();
                    cand[d] = (cand[d] + sign * step).clamp(0.0, 1.0);
                    if cand[d] == best.0[d] {
                        continue;
                    }
                    if let Some(e) = eval(&cand).filter(|e| e.margin.is_finite()) {
                        if let Some(o) = objective(&e) {
                            if o < bo {
                                bo = o;
                                best = (cand, e);
                                improved = true;
                            }
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }
    Some(best)
}

/// Maps unit-cube coordinates onto `[lo, hi]` intervals.
pub fn to_box(unit: &[f64], bounds: &[[f64; 2]], out: &mut [f64]) {
    for ((o, &t), &[lo, hi]) in out.iter_mut().zip(unit).zip(bounds) {
        *o = lo + t * (hi - lo);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_fills_cube() {
        let h = Halton::new(3, 7);
        let mut p = [0.0; 3];
        let mut counts = [0usize; 8];
        for i in 0..4096 {
            h.point_into(i, &mut p);
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
            let cell = (p[0] >= 0.5) as usize + 2 * (p[1] >= 0.5) as usize + 4 * (p[2] >= 0.5) as usize;
            counts[cell] += 1;
        }
        assert!(counts.iter().all(|&c| (480..=544).contains(&c)), "{counts:?}");
    }

    #[test]
    fn refinement_finds_narrow_violation() {
        // margin = -(v·S·v) with one narrow positive direction along (1, 1)
        let eval = |p: &[f64]| {
            let (a, b) = (p[0] - 0.5, p[1] - 0.5);
            let (s, d) = (a + b, a - b);
            let q = 1e-3 * s * s - 50.0 * d * d;
            Some(Eval {
                margin: -q,
                scale: q.abs(),
                size: a * a + b * b,
            })
        };
        let cfg = SampleConfig {
            samples: 64,
            seed: 1,
            refine: 4,
        };
        let r = sampled_check("narrow", 2, &cfg, eval, |_| BTreeMap::new());
        assert!(!r.passed);
        assert!(r.worst_margin < -1e-4);
    }
}
