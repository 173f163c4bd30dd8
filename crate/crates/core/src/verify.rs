//! Empirical checks of the simulation-function conditions, fitting of the
//! constants they leave open, trajectory deviation campaigns, and a safety
//! game solved on the abstraction.
//!
//! Concrete states are sampled from a refinement (`η/refine`) of the state grid
//! with seeded jitter inside each refinement cell; the continuum is never
//! covered exhaustively. The existential input choice is always `u := û`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{concrete_step, AbstractState, AbstractionError, Mode, TransitionTable};
use crate::certificate::{sampled_check, to_box, CertificateError, CheckReport, Eval, KInfFn, LocalSimFn, SampleConfig};
use crate::compose::{admissible_mode_vectors, cross_product, deviation_bound, network_step, ComposeError, ComposedState, ComposedSystem, GlobalSimFn};
use crate::flow::IntegratorConfig;
use crate::grid::{BoxSet, Grid, GridError};
use crate::model::{HybridState, NetworkSpec, SubsystemSpec};

pub const VERIFY_FORMAT_VERSION: u32 = 1;
/// Contraction factors scanned by the fits: 0.10, 0.15, …, 0.95.
pub fn sigma_grid() -> Vec<f64> {
    (2..=19).map(|k| k as f64 * 0.05).collect()
}
/// Relative growth of the refitted bound tolerated by the stability re-run.
pub const STABILITY_MARGIN: f64 = 0.05;
const LISTED: usize = 20;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error("{0}")]
    Invalid(String),
    #[error("{count} states exceed the cap of {cap}")]
    CapExceeded { count: u128, cap: usize },
}

/// Seed used for subsystem `i`'s samples, shared by the local and global fits.
pub fn subsystem_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Points of the `η/refine` refinement of `bounds` (evenly thinned to at most
/// `max` points), each jittered uniformly inside its refinement cell.
pub fn refinement_samples(bounds: &BoxSet, eta: f64, refine: usize, jitter: bool, max: usize, seed: u64) -> Result<Vec<Vec<f64>>, VerifyError> {
    if bounds.dim() == 0 {
        return Ok(vec![Vec::new()]);
    }
    let fine = Grid::new(bounds.clone(), eta / refine.max(1) as f64)?;
    let len = fine.len();
    let take = len.min(max.max(1));
    let h = fine.eta();
    Ok((0..take)
        .map(|k| {
            let idx = if take == len { k } else { k * len / take };
            let mut p = fine.point(idx);
            if jitter {
                let mut rng = stream_rng(seed, idx as u64);
                for (d, v) in p.iter_mut().enumerate() {
                    *v = (*v + rng.gen_range(-0.5..0.5) * h).clamp(bounds.lo(d), bounds.hi(d));
                }
            }
            p
        })
        .collect())
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `α(‖x−x̂‖) ≤ 𝒱((x,c),(x̂,c))` for every counter, on sampled pairs.
pub fn verify_condition1(simfn: &LocalSimFn, alpha: &KInfFn, bounds: &BoxSet, cfg: &SampleConfig) -> CheckReport {
    let n = bounds.dim();
    let split = |p: &[f64]| {
        let mut x = vec![0.0; n];
        let mut xh = vec![0.0; n];
        to_box(&p[..n], &bounds.0, &mut x);
        to_box(&p[n..], &bounds.0, &mut xh);
        (x, xh)
    };
    sampled_check(
        "condition1",
        2 * n,
        cfg,
        |p| {
            let (x, xh) = split(p);
            let v = simfn.cert.storage_value(&x, &xh).ok()?;
            let a = alpha.eval(inf_dist(&x, &xh));
            let worst = (0..=simfn.z_max).map(|c| simfn.multiplier(c) * v).fold(f64::INFINITY, f64::min);
            Some(Eval {
                margin: worst - a,
                scale: worst.abs() + a,
                size: x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum(),
            })
        },
        |p| {
            let (x, xh) = split(p);
            [("x".to_string(), x), ("xh".to_string(), xh)].into_iter().collect()
        },
    )
}

/// Global version over the composed state: `α̃(‖x−x̂‖∞) ≤ S̃` at every counter vector.
pub fn verify_global_condition1(g: &GlobalSimFn, alpha: &KInfFn, bounds: &[BoxSet], cfg: &SampleConfig) -> CheckReport {
    let all: Vec<[f64; 2]> = bounds.iter().flat_map(|b| b.0.iter().copied()).collect();
    let n = all.len();
    let split = |p: &[f64]| {
        let mut x = vec![0.0; n];
        let mut xh = vec![0.0; n];
        to_box(&p[..n], &all, &mut x);
        to_box(&p[n..], &all, &mut xh);
        (x, xh)
    };
    sampled_check(
        "global_condition1",
        2 * n,
        cfg,
        |p| {
            let (x, xh) = split(p);
            // S̃ is a weighted sum with independent counters, so its minimum over
            // counter vectors takes each term at its own worst counter
            let mut s = 0.0;
            let mut o = 0;
            for (mu, l) in g.mu.iter().zip(&g.locals) {
                let k = l.cert_dim();
                let v = l.cert.storage_value(&x[o..o + k], &xh[o..o + k]).ok()?;
                s += mu * (0..=l.z_max).map(|c| l.multiplier(c) * v).fold(f64::INFINITY, f64::min);
                o += k;
            }
            let a = alpha.eval(inf_dist(&x, &xh));
            Some(Eval {
                margin: s - a,
                scale: s.abs() + a,
                size: x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum(),
            })
        },
        |p| {
            let (x, xh) = split(p);
            [("x".to_string(), x), ("xh".to_string(), xh)].into_iter().collect()
        },
    )
}

/// Abstract successor minimising `𝒱(x⁺, ·)` among the stored successors of
/// `(cell, ω̂, û)` in `mode`; the counter follows the mode.
#[allow(clippy::too_many_arguments)]
pub fn best_successor(
    table: &TransitionTable,
    simfn: &LocalSimFn,
    x_plus: &[f64],
    cell: u32,
    w: usize,
    u: usize,
    counter: u32,
    mode: Mode,
) -> Option<(AbstractState, f64)> {
    let raw = best_raw(table, simfn, x_plus, cell as usize, w, u, mode)?;
    let next = mode.next_counter(counter);
    Some((AbstractState { cell: raw.0, counter: next }, simfn.multiplier(next) * raw.1))
}

fn best_raw(table: &TransitionTable, simfn: &LocalSimFn, x_plus: &[f64], cell: usize, w: usize, u: usize, mode: Mode) -> Option<(u32, f64)> {
    let grid = table.state_grid();
    let mut p = vec![0.0; grid.dim()];
    let mut best: Option<(u32, f64)> = None;
    for &c in table.mode_cells(cell, w, u, mode) {
        grid.point_into(c as usize, &mut p);
        let Ok(v) = simfn.cert.storage_value(x_plus, &p) else {
            continue;
        };
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((c, v));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalFitOptions {
    /// Refinement factor of the concrete sample grid.
    pub refine: usize,
    pub jitter: bool,
    /// Abstract cells paired with a concrete sample lie within this distance (default `2η^x`).
    pub pair_radius: Option<f64>,
    pub max_concrete_samples: usize,
    pub omega_samples: usize,
    /// Only pair `ω` with internal grid points within this distance; all pairs when absent.
    pub omega_radius: Option<f64>,
    /// Input gain of the fit as a multiple of the certificate's flow input gain.
    pub rho_u_scale: f64,
    pub seed: u64,
    pub stability_rerun: bool,
    /// Worst tuples per σ polished by local ascent.
    pub refine_top: usize,
}

impl Default for LocalFitOptions {
    fn default() -> Self {
        LocalFitOptions {
            refine: 5,
            jitter: true,
            pair_radius: None,
            max_concrete_samples: 20_000,
            omega_samples: 32,
            omega_radius: None,
            rho_u_scale: 0.0,
            seed: 0,
            stability_rerun: true,
            refine_top: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCounterexample {
    pub x: Vec<f64>,
    pub cell: u32,
    pub counter: u32,
    pub u: usize,
    pub omega: Vec<f64>,
    pub omega_index: usize,
    pub mode: Mode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEps {
    pub sigma: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub eps_rerun: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFitReport {
    pub subsystem: String,
    pub seed: u64,
    pub input_choice: String,
    pub concrete_samples: usize,
    pub omega_samples: usize,
    pub tuples: usize,
    pub blocked: usize,
    pub counterexamples: Vec<LocalCounterexample>,
    /// Sum-form fit: `𝒱⁺ ≤ σ̄𝒱 + supply + ρ̄_u(‖û‖) + ε̄`.
    pub sigma_bar: f64,
    pub eps_bar: f64,
    pub rho_u_bar: KInfFn,
    pub sum_form: Vec<SigmaEps>,
    /// The same tuples fitted in max-form `𝒱⁺ ≤ max{σ𝒱, ρ(‖û‖), ε}` (supply ignored).
    pub max_form: SigmaEps,
    pub stability: Option<Stability>,
    pub passed: bool,
}

/// Keeps the `k` largest values offered, each with its tuple.
#[derive(Clone)]
struct TopK<T> {
    k: usize,
    items: Vec<(f64, T)>,
}

impl<T> TopK<T> {
    fn new(k: usize) -> Self {
        TopK { k, items: Vec::new() }
    }

    fn floor(&self) -> f64 {
        if self.items.len() < self.k {
            f64::NEG_INFINITY
        } else {
            self.items.iter().map(|i| i.0).fold(f64::INFINITY, f64::min)
        }
    }

    fn offer(&mut self, v: f64, make: impl FnOnce() -> T) {
        if self.k == 0 || !(v > self.floor()) {
            return;
        }
        if self.items.len() == self.k {
            let (pos, _) = self
                .items
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bp, bv), (p, i)| if i.0 < bv { (p, i.0) } else { (bp, bv) });
            self.items.swap_remove(pos);
        }
        self.items.push((v, make()));
    }

    fn merge(mut self, other: TopK<T>) -> TopK<T> {
        for (v, t) in other.items {
            self.offer(v, || t);
        }
        self
    }
}

/// Coordinate (compass) ascent of `f` inside the box `[lo, hi]`; points where
/// `f` is undefined are rejected.
pub fn compass_maximize<F>(start: &[f64], lo: &[f64], hi: &[f64], step: f64, min_step: f64, max_sweeps: usize, f: F) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut best = start.to_vec();
    let mut bv = f(&best)?;
    let mut step = step;
    let mut sweeps = 0;
    while step > min_step && sweeps < max_sweeps {
        sweeps += 1;
        let mut improved = false;
        for d in 0..best.len() {
            for sign in [1.0, -1.0] {
                let mut cand = best.clone();
                cand[d] = (cand[d] + sign * step).clamp(lo[d], hi[d]);
                if cand[d] == best[d] {
                    continue;
                }
                if let Some(v) = f(&cand).filter(|v| v.is_finite()) {
                    if v > bv {
                        bv = v;
                        best = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Some((best, bv))
}

#[derive(Clone)]
struct LocalTuple {
    x: Vec<f64>,
    w: Vec<f64>,
    cell: usize,
    wi: usize,
    ui: usize,
    mode: Mode,
    c: u32,
}

#[derive(Clone)]
struct FitAcc<T> {
    sum: Vec<f64>,
    max: Vec<f64>,
    sum_top: Vec<TopK<T>>,
    max_top: Vec<TopK<T>>,
    tuples: usize,
    blocked: usize,
    examples: Vec<LocalCounterexample>,
}

impl<T> FitAcc<T> {
    fn new(sigmas: usize, top: usize) -> Self {
        FitAcc {
            sum: vec![f64::NEG_INFINITY; sigmas],
            max: vec![0.0; sigmas],
            sum_top: (0..sigmas).map(|_| TopK::new(top)).collect(),
            max_top: (0..sigmas).map(|_| TopK::new(top)).collect(),
            tuples: 0,
            blocked: 0,
            examples: Vec::new(),
        }
    }

    fn merge(mut self, other: FitAcc<T>) -> FitAcc<T> {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a = a.max(*b);
        }
        for (a, b) in self.max.iter_mut().zip(&other.max) {
            *a = a.max(*b);
        }
        self.sum_top = std::mem::take(&mut self.sum_top).into_iter().zip(other.sum_top).map(|(a, b)| a.merge(b)).collect();
        self.max_top = std::mem::take(&mut self.max_top).into_iter().zip(other.max_top).map(|(a, b)| a.merge(b)).collect();
        self.tuples += other.tuples;
        self.blocked += other.blocked;
        for e in other.examples {
            if self.examples.len() < LISTED {
                self.examples.push(e);
            }
        }
        self
    }
}

/// Picks the smallest bound over the σ grid, ties to the smallest σ.
fn pick(sigmas: &[f64], eps: &[f64]) -> SigmaEps {
    let mut best = 0;
    for k in 1..sigmas.len() {
        if eps[k] < eps[best] {
            best = k;
        }
    }
    SigmaEps {
        sigma: sigmas[best],
        eps: eps[best],
    }
}

/// Fraction of the period's flow supply credited to the step:
/// `θ = (1 − e^{−κ_c τ})/κ_c`, or `τ` when `κ_c = 0`.
pub fn flow_supply_weight(kappa_c: f64, tau: f64) -> f64 {
    if kappa_c == 0.0 {
        tau
    } else {
        (1.0 - (-kappa_c * tau).exp()) / kappa_c
    }
}

/// Per-tuple quantities: `(𝒱, 𝒱⁺, supply, ρ̄_u(‖û‖))`.
type Terms = (f64, f64, f64, f64);

fn sum_residual(sigma: f64, (s, sp, supply, rho): Terms) -> f64 {
    sp - sigma * s - supply - rho
}

fn max_form_value(sigma: f64, (s, sp, _, rho): Terms) -> Option<f64> {
    (sp > (sigma * s).max(rho)).then_some(sp)
}

struct LocalRun<'a> {
    spec: &'a SubsystemSpec,
    table: &'a TransitionTable,
    simfn: &'a LocalSimFn,
    integrator: &'a IntegratorConfig,
    radius: f64,
    omega_radius: Option<f64>,
    rho: KInfFn,
    theta: f64,
    top: usize,
    refine: usize,
}

impl LocalRun<'_> {
    fn supply(&self, mode: Mode, x: &[f64], p: &[f64], w: &[f64], wh: &[f64]) -> f64 {
        let (d, weight) = match mode {
            Mode::Flow => (&self.simfn.cert.d_c, self.theta),
            Mode::Jump => (&self.simfn.cert.d_d, 1.0),
        };
        let dx: Vec<f64> = x.iter().zip(p).map(|(a, b)| a - b).collect();
        let dw: Vec<f64> = w.iter().zip(wh).map(|(a, b)| a - b).collect();
        weight * crate::certificate::Certificate::supply(d, &dw, &dx)
    }

    fn terms(&self, t: &LocalTuple) -> Option<Terms> {
        let tb = self.table;
        let p = tb.state_grid().point(t.cell);
        let wh = tb.internal_grid().point(t.wi);
        let u = tb.external_grid().point(t.ui);
        let v = self.simfn.cert.storage_value(&t.x, &p).ok()?;
        let start = HybridState { x: t.x.clone(), c: t.c };
        let xp = concrete_step(self.spec, &start, &t.w, &u, t.mode, self.integrator).ok()?.x;
        let (_, vp) = best_raw(tb, self.simfn, &xp, t.cell, t.wi, t.ui, t.mode)?;
        let u_norm = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Some((
            self.simfn.multiplier(t.c) * v,
            self.simfn.multiplier(t.mode.next_counter(t.c)) * vp,
            self.supply(t.mode, &t.x, &p, &t.w, &wh),
            self.rho.eval(u_norm),
        ))
    }

    /// Local ascent of `objective` over `(x, ω)` around a sampled tuple,
    /// staying inside the sample cell, the boxes and the pairing radii.
    fn polish(&self, t: &LocalTuple, objective: impl Fn(Terms) -> Option<f64>) -> Option<f64> {
        let tb = self.table;
        let p = tb.state_grid().point(t.cell);
        let wh = tb.internal_grid().point(t.wi);
        let hx = tb.state_grid().eta() / self.refine.max(1) as f64;
        let hw = if self.spec.q > 0 { tb.internal_grid().eta() / self.refine.max(1) as f64 } else { 0.0 };
        let n = self.spec.n;
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for d in 0..n {
            lo.push((t.x[d] - hx).max(self.spec.state_bounds.lo(d)).max(p[d] - self.radius));
            hi.push((t.x[d] + hx).min(self.spec.state_bounds.hi(d)).min(p[d] + self.radius));
        }
        for d in 0..self.spec.q {
            let r = self.omega_radius.unwrap_or(f64::INFINITY);
            lo.push((t.w[d] - hw).max(self.spec.internal_bounds.lo(d)).max(wh[d] - r));
            hi.push((t.w[d] + hw).min(self.spec.internal_bounds.hi(d)).min(wh[d] + r));
        }
        let mut start = t.x.clone();
        start.extend_from_slice(&t.w);
        let step = 0.25 * hx.max(hw);
        compass_maximize(&start, &lo, &hi, step, step * 1e-6, 200, |z| {
            let mut c = t.clone();
            c.x = z[..n].to_vec();
            c.w = z[n..].to_vec();
            objective(self.terms(&c)?)
        })
        .map(|(_, v)| v)
    }

    fn accumulate(&self, xs: &[Vec<f64>], omegas: &[Vec<f64>], sigmas: &[f64]) -> FitAcc<LocalTuple> {
        let chunk = 16;
        let acc = xs
            .par_chunks(chunk)
            .map(|block| {
                let mut acc = FitAcc::new(sigmas.len(), self.top);
                for x in block {
                    self.sample(x, omegas, sigmas, &mut acc);
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(FitAcc::new(sigmas.len(), self.top), FitAcc::merge);
        self.refine_top(acc, sigmas)
    }

    fn refine_top(&self, mut acc: FitAcc<LocalTuple>, sigmas: &[f64]) -> FitAcc<LocalTuple> {
        let mut jobs = Vec::new();
        for k in 0..sigmas.len() {
            for (_, t) in &acc.sum_top[k].items {
                jobs.push((k, false, t));
            }
            for (_, t) in &acc.max_top[k].items {
                jobs.push((k, true, t));
            }
        }
        let found: Vec<(usize, bool, Option<f64>)> = jobs
            .par_iter()
            .map(|&(k, is_max, t)| {
                let sigma = sigmas[k];
                let v = if is_max {
                    self.polish(t, |terms| max_form_value(sigma, terms))
                } else {
                    self.polish(t, |terms| Some(sum_residual(sigma, terms)))
                };
                (k, is_max, v)
            })
            .collect();
        for (k, is_max, v) in found {
            if let Some(v) = v {
                let slot = if is_max { &mut acc.max[k] } else { &mut acc.sum[k] };
                *slot = slot.max(v);
            }
        }
        acc
    }

    fn sample(&self, x: &[f64], omegas: &[Vec<f64>], sigmas: &[f64], acc: &mut FitAcc<LocalTuple>) {
        let t = self.table;
        let (z_min, z_max) = (t.z_min(), t.z_max());
        let cells = t.state_grid().ball_points(x, self.radius);
        let cell_points: Vec<Vec<f64>> = cells.iter().map(|&c| t.state_grid().point(c)).collect();
        let Ok(v_pre) = cell_points
            .iter()
            .map(|p| self.simfn.cert.storage_value(x, p))
            .collect::<Result<Vec<f64>, _>>()
        else {
            return;
        };
        let wg = t.internal_grid();
        let ug = t.external_grid();
        let mut u = vec![0.0; self.spec.m];
        let mut wh = vec![0.0; self.spec.q];
        for ui in 0..ug.len() {
            ug.point_into(ui, &mut u);
            let u_norm = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let rho = self.rho.eval(u_norm);
            for mode in [Mode::Flow, Mode::Jump] {
                let counters: Vec<u32> = (0..=z_max).filter(|&c| mode.is_admissible(c, z_min, z_max)).collect();
                if counters.is_empty() {
                    continue;
                }
                for w in omegas {
                    let start = HybridState { x: x.to_vec(), c: counters[0] };
                    let x_plus = match concrete_step(self.spec, &start, w, &u, mode, self.integrator) {
                        Ok(s) => s.x,
                        Err(e) => {
                            acc.blocked += 1;
                            if acc.examples.len() < LISTED {
                                acc.examples.push(LocalCounterexample {
                                    x: x.to_vec(),
                                    cell: cells.first().map_or(0, |c| *c as u32),
                                    counter: counters[0],
                                    u: ui,
                                    omega: w.clone(),
                                    omega_index: 0,
                                    mode,
                                    reason: format!("concrete step failed: {e}"),
                                });
                            }
                            continue;
                        }
                    };
                    for wi in 0..wg.len() {
                        wg.point_into(wi, &mut wh);
                        if let Some(r) = self.omega_radius {
                            if inf_dist(w, &wh) > r {
                                continue;
                            }
                        }
                        for (ci, &cell) in cells.iter().enumerate() {
                            let supply = self.supply(mode, x, &cell_points[ci], w, &wh);
                            let Some((_, v_raw)) = best_raw(t, self.simfn, &x_plus, cell, wi, ui, mode) else {
                                acc.blocked += counters.len();
                                if acc.examples.len() < LISTED {
                                    acc.examples.push(LocalCounterexample {
                                        x: x.to_vec(),
                                        cell: cell as u32,
                                        counter: counters[0],
                                        u: ui,
                                        omega: w.clone(),
                                        omega_index: wi,
                                        mode,
                                        reason: "empty abstract successor set".into(),
                                    });
                                }
                                continue;
                            };
                            for &c in &counters {
                                let terms = (
                                    self.simfn.multiplier(c) * v_pre[ci],
                                    self.simfn.multiplier(mode.next_counter(c)) * v_raw,
                                    supply,
                                    rho,
                                );
                                acc.tuples += 1;
                                let make = || LocalTuple {
                                    x: x.to_vec(),
                                    w: w.clone(),
                                    cell,
                                    wi,
                                    ui,
                                    mode,
                                    c,
                                };
                                for (k, &sigma) in sigmas.iter().enumerate() {
                                    let r = sum_residual(sigma, terms);
                                    if r > acc.sum[k] {
                                        acc.sum[k] = r;
                                    }
                                    acc.sum_top[k].offer(r, make);
                                    if let Some(v) = max_form_value(sigma, terms) {
                                        if v > acc.max[k] {
                                            acc.max[k] = v;
                                        }
                                        acc.max_top[k].offer(v, make);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fits the local constants on sampled tuples `(x, x̂, c, û, ω, ω̂, mode)`.
/// The worst tuples found for each σ are then polished by local ascent over
/// `(x, ω)`, so the fitted bounds approach the supremum rather than the sample maximum.
pub fn verify_condition2_local(
    spec: &SubsystemSpec,
    table: &TransitionTable,
    simfn: &LocalSimFn,
    integrator: &IntegratorConfig,
    opts: &LocalFitOptions,
) -> Result<LocalFitReport, VerifyError> {
    table.check_against(spec)?;
    let eta = table.state_grid().eta();
    let run = LocalRun {
        spec,
        table,
        simfn,
        integrator,
        radius: opts.pair_radius.unwrap_or(2.0 * eta) + 1e-12,
        omega_radius: opts.omega_radius,
        rho: if opts.rho_u_scale > 0.0 && !simfn.cert.rho_uc.is_zero() {
            simfn.cert.rho_uc.scaled(opts.rho_u_scale)?
        } else {
            KInfFn::zero()
        },
        theta: flow_supply_weight(simfn.cert.kappa_c, spec.tau),
        top: opts.refine_top,
        refine: opts.refine,
    };
    let sigmas = sigma_grid();
    let draw = |seed: u64| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), VerifyError> {
        let xs = refinement_samples(&spec.state_bounds, eta, opts.refine, opts.jitter, opts.max_concrete_samples, seed)?;
        let ws = refinement_samples(
            &spec.internal_bounds,
            table.internal_grid().eta(),
            opts.refine,
            opts.jitter,
            opts.omega_samples,
            seed ^ 0x5555_5555,
        )?;
        Ok((xs, ws))
    };
    let (xs, ws) = draw(opts.seed)?;
    let acc = run.accumulate(&xs, &ws, &sigmas);
    let eps: Vec<f64> = acc.sum.iter().map(|r| r.max(0.0)).collect();
    let fit = pick(&sigmas, &eps);
    let max_form = pick(&sigmas, &acc.max);
    let stability = if opts.stability_rerun && acc.tuples > 0 {
        let (xs2, ws2) = draw(opts.seed.wrapping_add(0x2545_F491_4F6C_DD1D))?;
        let k = sigmas.iter().position(|s| *s == fit.sigma).unwrap();
        let rerun = run.accumulate(&xs2, &ws2, &sigmas[k..=k]);
        let eps_rerun = rerun.sum[0].max(0.0);
        Some(Stability {
            eps_rerun,
            stable: eps_rerun <= fit.eps * (1.0 + STABILITY_MARGIN) + 1e-12,
        })
    } else {
        None
    };
    let passed = acc.blocked == 0 && acc.tuples > 0 && fit.eps.is_finite() && fit.sigma < 1.0 && stability.as_ref().map_or(true, |s| s.stable);
    Ok(LocalFitReport {
        subsystem: spec.name.clone(),
        seed: opts.seed,
        input_choice: "u = u_hat".into(),
        concrete_samples: xs.len(),
        omega_samples: ws.len(),
        tuples: acc.tuples,
        blocked: acc.blocked,
        counterexamples: acc.examples,
        sigma_bar: fit.sigma,
        eps_bar: fit.eps,
        rho_u_bar: run.rho.clone(),
        sum_form: sigmas.iter().zip(&eps).map(|(&sigma, &eps)| SigmaEps { sigma, eps }).collect(),
        max_form,
        stability,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalFitOptions {
    pub refine: usize,
    pub jitter: bool,
    /// Per-subsystem pairing radius (default `2η^x_i`).
    pub pair_radius: Option<Vec<f64>>,
    pub max_concrete_samples: usize,
    /// Random tuples drawn when exhaustive enumeration would exceed this many.
    pub samples: usize,
    pub rho_u_scale: f64,
    pub seed: u64,
    pub stability_rerun: bool,
    /// Worst tuples per σ polished by local ascent.
    pub refine_top: usize,
}

impl Default for GlobalFitOptions {
    fn default() -> Self {
        GlobalFitOptions {
            refine: 5,
            jitter: true,
            pair_radius: None,
            max_concrete_samples: 20_000,
            samples: 20_000,
            rho_u_scale: 0.0,
            seed: 0,
            stability_rerun: true,
            refine_top: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCounterexample {
    pub x: Vec<f64>,
    pub state: ComposedState,
    pub u: Vec<usize>,
    pub modes: Vec<Mode>,
    pub subsystem: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFitReport {
    pub seed: u64,
    pub exhaustive: bool,
    pub tuples: usize,
    pub blocked: usize,
    pub counterexamples: Vec<GlobalCounterexample>,
    /// Max-form fit: `S̃⁺ ≤ max{σ̃ S̃, ρ̃_u(‖û‖), ε̃}`.
    pub sigma_tilde: f64,
    pub eps_tilde: f64,
    pub rho_u_tilde: KInfFn,
    pub max_form: Vec<SigmaEps>,
    pub alpha_tilde: Option<KInfFn>,
    pub alpha_error: Option<String>,
    pub condition1: Option<CheckReport>,
    pub stability: Option<Stability>,
    pub passed: bool,
}

/// One paired step of the network: the abstract side picks, per subsystem, the
/// internal choice and stored successor minimising its weighted term.
pub struct PairedStep {
    pub next: ComposedState,
    pub s_plus: f64,
}

/// Best composed successor for the concrete successor `x_plus` (flat).
pub fn best_composed_successor(
    sys: &ComposedSystem,
    g: &GlobalSimFn,
    x_plus: &[f64],
    state: &[AbstractState],
    u: &[usize],
    modes: &[Mode],
) -> Result<PairedStep, (usize, String)> {
    let cells: Vec<u32> = state.iter().map(|s| s.cell).collect();
    let choices = sys.omega_choices(&cells);
    let mut next = Vec::with_capacity(state.len());
    let mut s_plus = 0.0;
    let mut o = 0;
    for (i, t) in sys.tables().iter().enumerate() {
        let n = t.header().n;
        let xp = &x_plus[o..o + n];
        o += n;
        if choices[i].is_empty() {
            return Err((i, "no internal grid point within the matching tolerance".into()));
        }
        let mut best: Option<(u32, f64)> = None;
        for &w in &choices[i] {
            if let Some((c, v)) = best_raw(t, &g.locals[i], xp, state[i].cell as usize, w, u[i], modes[i]) {
                if best.map_or(true, |(_, b)| v < b) {
                    best = Some((c, v));
                }
            }
        }
        let Some((cell, v)) = best else {
            return Err((i, "empty abstract successor set".into()));
        };
        let counter = modes[i].next_counter(state[i].counter);
        s_plus += g.mu[i] * g.locals[i].multiplier(counter) * v;
        next.push(AbstractState { cell, counter });
    }
    Ok(PairedStep { next, s_plus })
}

fn abstract_flat(sys: &ComposedSystem, state: &[AbstractState]) -> Vec<f64> {
    let cells: Vec<u32> = state.iter().map(|s| s.cell).collect();
    sys.abstract_point(&cells)
}

fn s_tilde(g: &GlobalSimFn, x: &[f64], xh: &[f64], state: &[AbstractState]) -> Option<f64> {
    let counters: Vec<u32> = state.iter().map(|s| s.counter).collect();
    g.eval_flat(x, xh, &counters).ok()
}

struct GlobalTuple {
    x: Vec<f64>,
    state: ComposedState,
}

#[derive(Clone)]
struct GlobalCandidate {
    x: Vec<f64>,
    state: ComposedState,
    input: usize,
    modes: Vec<Mode>,
}

struct GlobalEval {
    eps: Vec<f64>,
    top: Vec<TopK<GlobalCandidate>>,
    count: usize,
    blocked: usize,
    examples: Vec<GlobalCounterexample>,
}

struct GlobalRun<'a> {
    spec: &'a NetworkSpec,
    sys: &'a ComposedSystem,
    g: &'a GlobalSimFn,
    integrator: &'a IntegratorConfig,
    rho: KInfFn,
    inputs: Vec<Vec<usize>>,
    input_values: Vec<(Vec<f64>, f64)>,
    /// Per flat coordinate: sample half-width, pairing radius, box.
    h: Vec<f64>,
    radius: Vec<f64>,
    bounds: Vec<[f64; 2]>,
    top: usize,
}

impl GlobalRun<'_> {
    /// `(S̃, S̃⁺, ρ̃_u(‖û‖))` for one tuple and mode vector.
    fn terms(&self, x: &[f64], state: &[AbstractState], input: usize, modes: &[Mode]) -> Result<(f64, f64, f64), (usize, String)> {
        let xh = abstract_flat(self.sys, state);
        let s = s_tilde(self.g, x, &xh, state).ok_or((usize::MAX, "storage function undefined".to_string()))?;
        let (uv, u_norm) = &self.input_values[input];
        let xp = network_step(self.spec, x, uv, modes, self.integrator).map_err(|e| (usize::MAX, e.to_string()))?;
        let p = best_composed_successor(self.sys, self.g, &xp, state, &self.inputs[input], modes)?;
        Ok((s, p.s_plus, self.rho.eval(*u_norm)))
    }

    fn polish(&self, c: &GlobalCandidate, sigma: f64) -> Option<f64> {
        let xh = abstract_flat(self.sys, &c.state);
        let lo: Vec<f64> = (0..c.x.len())
            .map(|d| (c.x[d] - self.h[d]).max(self.bounds[d][0]).max(xh[d] - self.radius[d]))
            .collect();
        let hi: Vec<f64> = (0..c.x.len())
            .map(|d| (c.x[d] + self.h[d]).min(self.bounds[d][1]).min(xh[d] + self.radius[d]))
            .collect();
        let step = 0.25 * self.h.iter().copied().fold(0.0, f64::max);
        compass_maximize(&c.x, &lo, &hi, step, step * 1e-6, 200, |z| {
            let (s, sp, rho) = self.terms(z, &c.state, c.input, &c.modes).ok()?;
            max_form_value(sigma, (s, sp, 0.0, rho))
        })
        .map(|(_, v)| v)
    }

    fn evaluate(&self, tuples: &[GlobalTuple], sigmas: &[f64]) -> GlobalEval {
        let bounds: Vec<(u32, u32)> = self.sys.tables().iter().map(|t| (t.z_min(), t.z_max())).collect();
        let fresh = || GlobalEval {
            eps: vec![0.0; sigmas.len()],
            top: (0..sigmas.len()).map(|_| TopK::new(self.top)).collect(),
            count: 0,
            blocked: 0,
            examples: Vec::new(),
        };
        let parts: Vec<GlobalEval> = tuples
            .par_chunks(64)
            .map(|block| {
                let mut acc = fresh();
                for t in block {
                    let counters: Vec<u32> = t.state.iter().map(|a| a.counter).collect();
                    for modes in admissible_mode_vectors(&counters, &bounds) {
                        for input in 0..self.inputs.len() {
                            match self.terms(&t.x, &t.state, input, &modes) {
                                Ok((s, sp, rho)) => {
                                    acc.count += 1;
                                    for (k, &sigma) in sigmas.iter().enumerate() {
                                        if let Some(v) = max_form_value(sigma, (s, sp, 0.0, rho)) {
                                            acc.eps[k] = acc.eps[k].max(v);
                                            acc.top[k].offer(v, || GlobalCandidate {
                                                x: t.x.clone(),
                                                state: t.state.clone(),
                                                input,
                                                modes: modes.clone(),
                                            });
                                        }
                                    }
                                }
                                Err((i, reason)) => {
                                    acc.blocked += 1;
                                    if acc.examples.len() < LISTED {
                                        acc.examples.push(GlobalCounterexample {
                                            x: t.x.clone(),
                                            state: t.state.clone(),
                                            u: self.inputs[input].clone(),
                                            modes: modes.clone(),
                                            subsystem: i,
                                            reason,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut acc = fresh();
        for p in parts {
            for (a, v) in acc.eps.iter_mut().zip(p.eps) {
                *a = a.max(v);
            }
            acc.top = std::mem::take(&mut acc.top).into_iter().zip(p.top).map(|(a, b)| a.merge(b)).collect();
            acc.count += p.count;
            acc.blocked += p.blocked;
            for x in p.examples {
                if acc.examples.len() < LISTED {
                    acc.examples.push(x);
                }
            }
        }
        let jobs: Vec<(usize, &GlobalCandidate)> = acc.top.iter().enumerate().flat_map(|(k, t)| t.items.iter().map(move |(_, c)| (k, c))).collect();
        let found: Vec<(usize, Option<f64>)> = jobs.par_iter().map(|&(k, c)| (k, self.polish(c, sigmas[k]))).collect();
        for (k, v) in found {
            if let Some(v) = v {
                acc.eps[k] = acc.eps[k].max(v);
            }
        }
        acc
    }
}

fn global_tuples(
    spec: &NetworkSpec,
    sys: &ComposedSystem,
    opts: &GlobalFitOptions,
    seed: u64,
) -> Result<(Vec<GlobalTuple>, bool), VerifyError> {
    let tables = sys.tables();
    // per subsystem: candidate (x sample, cell) pairs
    let mut local_pairs: Vec<Vec<(Vec<f64>, u32)>> = Vec::with_capacity(tables.len());
    for (i, (s, t)) in spec.subsystems.iter().zip(tables).enumerate() {
        let eta = t.state_grid().eta();
        let radius = opts.pair_radius.as_ref().map_or(2.0 * eta, |r| r[i]) + 1e-12;
        let xs = refinement_samples(&s.state_bounds, eta, opts.refine, opts.jitter, opts.max_concrete_samples, subsystem_seed(seed, i))?;
        let mut pairs = Vec::new();
        for x in xs {
            for c in t.state_grid().ball_points(&x, radius) {
                pairs.push((x.clone(), c as u32));
            }
        }
        local_pairs.push(pairs);
    }
    let counters: Vec<u32> = tables.iter().map(|t| t.z_max() + 1).collect();
    let total = local_pairs
        .iter()
        .zip(&counters)
        .fold(1u128, |acc, (p, &z)| acc.saturating_mul(p.len() as u128 * z as u128));
    let build = |choice: &[(usize, u32)]| -> GlobalTuple {
        let mut x = Vec::new();
        let mut state = Vec::new();
        for (i, &(pi, c)) in choice.iter().enumerate() {
            let (xi, cell) = &local_pairs[i][pi];
            x.extend_from_slice(xi);
            state.push(AbstractState { cell: *cell, counter: c });
        }
        GlobalTuple { x, state }
    };
    if total <= opts.samples as u128 {
        let sets: Vec<Vec<(usize, u32)>> = local_pairs
            .iter()
            .zip(&counters)
            .map(|(p, &z)| (0..p.len()).flat_map(|k| (0..z).map(move |c| (k, c))).collect())
            .collect();
        let tuples = cross_product(&sets).iter().map(|c| build(c)).collect();
        return Ok((tuples, true));
    }
    let tuples = (0..opts.samples)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let choice: Vec<(usize, u32)> = local_pairs
                .iter()
                .zip(&counters)
                .map(|(p, &z)| (rng.gen_range(0..p.len()), rng.gen_range(0..z)))
                .collect();
            build(&choice)
        })
        .collect();
    Ok((tuples, false))
}

/// Fits `(σ̃, ρ̃_u, ε̃)` of the max-form network condition on sampled tuples, and
/// checks the network lower bound `α̃`. As in the local fit, the worst tuples
/// per σ are polished by local ascent over the concrete state.
pub fn verify_condition2_global(
    spec: &NetworkSpec,
    sys: &ComposedSystem,
    g: &GlobalSimFn,
    integrator: &IntegratorConfig,
    opts: &GlobalFitOptions,
    condition1: &SampleConfig,
) -> Result<GlobalFitReport, VerifyError> {
    if sys.len() != spec.subsystems.len() || g.locals.len() != sys.len() {
        return Err(VerifyError::Invalid("network, tables and simulation functions disagree in size".into()));
    }
    for (s, t) in spec.subsystems.iter().zip(sys.tables()) {
        t.check_against(s)?;
    }
    let rho = if opts.rho_u_scale > 0.0 {
        // ρ̃_u = scale · Σ μ_i ρ_uc,i; zero when unused
        let mut terms = Vec::new();
        for (mu, l) in g.mu.iter().zip(&g.locals) {
            for &[a, p] in l.cert.rho_uc.terms() {
                if *mu > 0.0 {
                    terms.push([a * mu * opts.rho_u_scale, p]);
                }
            }
        }
        KInfFn::new(terms)?
    } else {
        KInfFn::zero()
    };
    let inputs = sys.input_combinations();
    let input_values = inputs
        .iter()
        .map(|u| {
            let mut v = Vec::new();
            for (i, t) in sys.tables().iter().enumerate() {
                v.extend(t.external_grid().point(u[i]));
            }
            let norm = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            (v, norm)
        })
        .collect();
    let (mut h, mut radius, mut bounds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (s, t)) in spec.subsystems.iter().zip(sys.tables()).enumerate() {
        let eta = t.state_grid().eta();
        for d in 0..s.n {
            h.push(eta / opts.refine.max(1) as f64);
            radius.push(opts.pair_radius.as_ref().map_or(2.0 * eta, |r| r[i]) + 1e-12);
            bounds.push(s.state_bounds.0[d]);
        }
    }
    let run = GlobalRun {
        spec,
        sys,
        g,
        integrator,
        rho: rho.clone(),
        inputs,
        input_values,
        h,
        radius,
        bounds,
        top: opts.refine_top,
    };
    let sigmas = sigma_grid();
    let (tuples, exhaustive) = global_tuples(spec, sys, opts, opts.seed)?;
    let acc = run.evaluate(&tuples, &sigmas);
    let fit = pick(&sigmas, &acc.eps);
    let stability = if opts.stability_rerun && acc.count > 0 {
        let (again, _) = global_tuples(spec, sys, opts, opts.seed.wrapping_add(0x2545_F491_4F6C_DD1D))?;
        let e2 = run.evaluate(&again, &[fit.sigma]).eps[0];
        Some(Stability {
            eps_rerun: e2,
            stable: e2 <= fit.eps * (1.0 + STABILITY_MARGIN) + 1e-12,
        })
    } else {
        None
    };
    let (alpha_tilde, alpha_error, cond1) = match g.alpha_tilde() {
        Ok(a) => {
            let bounds: Vec<BoxSet> = spec.subsystems.iter().map(|s| s.state_bounds.clone()).collect();
            let r = verify_global_condition1(g, &a, &bounds, condition1);
            (Some(a), None, Some(r))
        }
        Err(e) => (None, Some(e.to_string()), None),
    };
    let passed = acc.blocked == 0
        && acc.count > 0
        && fit.sigma < 1.0
        && fit.eps.is_finite()
        && stability.as_ref().map_or(true, |s| s.stable)
        && cond1.as_ref().is_some_and(|c| c.passed);
    Ok(GlobalFitReport {
        seed: opts.seed,
        exhaustive,
        tuples: acc.count,
        blocked: acc.blocked,
        counterexamples: acc.examples,
        sigma_tilde: fit.sigma,
        eps_tilde: fit.eps,
        rho_u_tilde: rho,
        max_form: sigmas.iter().zip(&acc.eps).map(|(&sigma, &eps)| SigmaEps { sigma, eps }).collect(),
        alpha_tilde,
        alpha_error,
        condition1: cond1,
        stability,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryOptions {
    pub runs: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Initial pairs satisfy `S̃ ≤ initial_level` (default `ε̃`).
    pub initial_level: Option<f64>,
    pub max_traces: usize,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            runs: 1000,
            horizon: 50,
            seed: 0,
            initial_level: None,
            max_traces: 3,
        }
    }
}

/// Fitted network constants consumed by the campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    pub sigma_tilde: f64,
    pub eps_tilde: f64,
    pub rho_u_tilde: KInfFn,
    pub alpha_tilde: KInfFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub x: Vec<f64>,
    pub xh: Vec<f64>,
    pub counters: Vec<u32>,
    pub s_tilde: f64,
    pub envelope: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDump {
    pub run: usize,
    pub reason: String,
    pub rows: Vec<TraceRow>,
}

impl TraceDump {
    pub fn to_csv(&self, eps_hat: f64) -> String {
        let n = self.rows.first().map_or(0, |r| r.x.len());
        let k = self.rows.first().map_or(0, |r| r.counters.len());
        let mut head = vec!["step".to_string(), "time".to_string()];
        head.extend((1..=n).map(|j| format!("x{j}")));
        head.extend((1..=n).map(|j| format!("xh{j}")));
        head.extend((1..=k).map(|j| format!("c{j}")));
        head.extend(["s_tilde", "envelope", "deviation", "eps_hat"].map(String::from));
        let mut out = head.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cols = vec![r.step.to_string(), format!("{}", r.time)];
            cols.extend(r.x.iter().map(|v| format!("{v}")));
            cols.extend(r.xh.iter().map(|v| format!("{v}")));
            cols.extend(r.counters.iter().map(|v| v.to_string()));
            cols.extend([r.s_tilde, r.envelope, r.deviation, eps_hat].map(|v| format!("{v}")));
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub seed: u64,
    pub runs: usize,
    pub horizon: usize,
    pub eps_hat: f64,
    pub eps_tilde: f64,
    pub sigma_tilde: f64,
    pub max_deviation: f64,
    pub max_ratio: f64,
    pub bound_violations: usize,
    pub envelope_violations: usize,
    pub blocked_runs: usize,
    pub traces: Vec<TraceDump>,
    pub passed: bool,
}

struct RunOutcome {
    max_dev: f64,
    bound_violation: bool,
    envelope_violation: bool,
    blocked: bool,
    trace: Vec<TraceRow>,
    reason: String,
}

/// Random paired runs of the concrete network and the abstract strategy;
/// every step must keep `‖x − x̂‖∞ ≤ ε̂`.
pub fn verify_trajectory_bound(
    spec: &NetworkSpec,
    sys: &ComposedSystem,
    g: &GlobalSimFn,
    fitted: &FittedConstants,
    integrator: &IntegratorConfig,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryReport, VerifyError> {
    let r_max = spec
        .subsystems
        .iter()
        .flat_map(|s| s.external_bounds.0.iter())
        .fold(0.0f64, |a, &[lo, hi]| a.max(lo.abs()).max(hi.abs()));
    let eps_hat = deviation_bound(&fitted.alpha_tilde, &fitted.rho_u_tilde, fitted.eps_tilde, r_max)?;
    let level = opts.initial_level.unwrap_or(fitted.eps_tilde);
    let bounds: Vec<(u32, u32)> = sys.tables().iter().map(|t| (t.z_min(), t.z_max())).collect();
    let tau = spec.tau();
    let outcomes: Vec<RunOutcome> = (0..opts.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream_rng(opts.seed, run as u64);
            let mut state: ComposedState = sys
                .tables()
                .iter()
                .map(|t| AbstractState {
                    cell: rng.gen_range(0..t.state_grid().len()) as u32,
                    counter: rng.gen_range(0..=t.z_max()),
                })
                .collect();
            let mut xh = abstract_flat(sys, &state);
            let ball = fitted.alpha_tilde.inverse(level).unwrap_or(0.0);
            let mut x = xh.clone();
            for _ in 0..64 {
                let mut cand = xh.clone();
                let mut o = 0;
                for s in &spec.subsystems {
                    for d in 0..s.n {
                        let (lo, hi) = (s.state_bounds.lo(d), s.state_bounds.hi(d));
                        cand[o + d] = (xh[o + d] + rng.gen_range(-1.0..=1.0) * ball).clamp(lo, hi);
                    }
                    o += s.n;
                }
                if s_tilde(g, &cand, &xh, &state).is_some_and(|v| v <= level) {
                    x = cand;
                    break;
                }
            }
            let s0 = s_tilde(g, &x, &xh, &state).unwrap_or(f64::INFINITY);
            let mut out = RunOutcome {
                max_dev: 0.0,
                bound_violation: false,
                envelope_violation: false,
                blocked: false,
                trace: Vec::new(),
                reason: String::new(),
            };
            let mut u_sup = 0.0f64;
            for k in 0..=opts.horizon {
                let s = s_tilde(g, &x, &xh, &state).unwrap_or(f64::INFINITY);
                let envelope = (fitted.sigma_tilde.powi(k as i32) * s0).max(fitted.rho_u_tilde.eval(u_sup)).max(fitted.eps_tilde);
                let dev = inf_dist(&x, &xh);
                out.max_dev = out.max_dev.max(dev);
                out.trace.push(TraceRow {
                    step: k,
                    time: k as f64 * tau,
                    x: x.clone(),
                    xh: xh.clone(),
                    counters: state.iter().map(|a| a.counter).collect(),
                    s_tilde: s,
                    envelope,
                    deviation: dev,
                });
                if dev > eps_hat * (1.0 + 1e-9) + 1e-12 && !out.bound_violation {
                    out.bound_violation = true;
                    out.reason = format!("deviation {dev} exceeds bound {eps_hat} at step {k}");
                }
                if s > envelope * (1.0 + 1e-9) + 1e-12 && !out.envelope_violation {
                    out.envelope_violation = true;
                    if out.reason.is_empty() {
                        out.reason = format!("level {s} above envelope {envelope} at step {k}");
                    }
                }
                if k == opts.horizon {
                    break;
                }
                let u: Vec<usize> = sys.tables().iter().map(|t| rng.gen_range(0..t.external_grid().len())).collect();
                let mut uv = Vec::new();
                for (i, t) in sys.tables().iter().enumerate() {
                    uv.extend(t.external_grid().point(u[i]));
                }
                u_sup = uv.iter().fold(u_sup, |a, v| a.max(v.abs()));
                let modes: Vec<Mode> = state
                    .iter()
                    .zip(&bounds)
                    .map(|(a, &(lo, hi))| {
                        let m = crate::abstraction::admissible_modes(a.counter, lo, hi);
                        m[rng.gen_range(0..m.len())]
                    })
                    .collect();
                let step = network_step(spec, &x, &uv, &modes, integrator)
                    .map_err(|e| (usize::MAX, e.to_string()))
                    .and_then(|xp| best_composed_successor(sys, g, &xp, &state, &u, &modes).map(|p| (xp, p)));
                match step {
                    Ok((xp, p)) => {
                        x = xp;
                        state = p.next;
                        xh = abstract_flat(sys, &state);
                    }
                    Err((i, reason)) => {
                        out.blocked = true;
                        out.reason = format!("blocked at step {k} in subsystem {i}: {reason}");
                        break;
                    }
                }
            }
            out
        })
        .collect();
    let mut report = TrajectoryReport {
        seed: opts.seed,
        runs: opts.runs,
        horizon: opts.horizon,
        eps_hat,
        eps_tilde: fitted.eps_tilde,
        sigma_tilde: fitted.sigma_tilde,
        max_deviation: 0.0,
        max_ratio: 0.0,
        bound_violations: 0,
        envelope_violations: 0,
        blocked_runs: 0,
        traces: Vec::new(),
        passed: false,
    };
    for (run, o) in outcomes.into_iter().enumerate() {
        report.max_deviation = report.max_deviation.max(o.max_dev);
        report.bound_violations += o.bound_violation as usize;
        report.envelope_violations += o.envelope_violation as usize;
        report.blocked_runs += o.blocked as usize;
        if (o.bound_violation || o.envelope_violation || o.blocked) && report.traces.len() < opts.max_traces {
            report.traces.push(TraceDump {
                run,
                reason: o.reason,
                rows: o.trace,
            });
        }
    }
    report.max_ratio = if eps_hat > 0.0 {
        report.max_deviation / eps_hat
    } else if report.max_deviation == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    report.passed = report.bound_violations == 0 && report.envelope_violations == 0 && report.blocked_runs == 0;
    Ok(report)
}

/// A finite game for safety synthesis: the controller picks an input, the
/// environment picks any successor. `None` marks an input that may block.
pub trait FiniteGame: Sync {
    fn num_states(&self) -> usize;
    fn num_inputs(&self) -> usize;
    fn successors(&self, state: usize, input: usize) -> Option<Vec<usize>>;
}

/// A single subsystem's table; internal inputs and modes are adversarial.
pub struct TableGame<'a> {
    pub table: &'a TransitionTable,
}

impl FiniteGame for TableGame<'_> {
    fn num_states(&self) -> usize {
        self.table.num_abstract_states()
    }

    fn num_inputs(&self) -> usize {
        self.table.external_grid().len()
    }

    fn successors(&self, state: usize, input: usize) -> Option<Vec<usize>> {
        let z = self.table.z_max() + 1;
        let s = AbstractState {
            cell: state as u32 / z,
            counter: state as u32 % z,
        };
        let mut out = Vec::new();
        for w in 0..self.table.internal_grid().len() {
            let succ = self.table.successors(s, w, input);
            if succ.blocked {
                return None;
            }
            out.extend(succ.states.iter().map(|a| (a.cell * z + a.counter) as usize));
        }
        out.sort_unstable();
        out.dedup();
        Some(out)
    }
}

/// The composed system; internal choices and modes are adversarial.
pub struct ComposedGame<'a> {
    pub system: &'a ComposedSystem,
    inputs: Vec<Vec<usize>>,
    states: usize,
}

impl<'a> ComposedGame<'a> {
    pub fn new(system: &'a ComposedSystem, cap: usize) -> Result<Self, VerifyError> {
        let count = system.state_count();
        if count > cap as u128 {
            return Err(VerifyError::CapExceeded { count, cap });
        }
        Ok(ComposedGame {
            system,
            inputs: system.input_combinations(),
            states: count as usize,
        })
    }

    pub fn input(&self, k: usize) -> &[usize] {
        &self.inputs[k]
    }
}

impl FiniteGame for ComposedGame<'_> {
    fn num_states(&self) -> usize {
        self.states
    }

    fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn successors(&self, state: usize, input: usize) -> Option<Vec<usize>> {
        let s = self.system.state_from_id(state);
        let succ = self.system.composed_successors(&s, &self.inputs[input]);
        if succ.blocked.is_some() {
            return None;
        }
        let mut ids: Vec<usize> = succ.states.iter().map(|t| self.system.state_id(t)).collect();
        ids.sort_unstable();
        Some(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyController {
    pub winning: Vec<usize>,
    pub allowed: BTreeMap<usize, Vec<usize>>,
    pub iterations: usize,
    /// Winning-set size after each iteration.
    pub history: Vec<usize>,
}

/// Greatest fixed point of `W ↦ {s ∈ W ∩ Safe : ∃u, post(s, u) ⊆ W}`.
pub fn safety_fixpoint<G: FiniteGame>(game: &G, safe: impl Fn(usize) -> bool) -> SafetyController {
    let n = game.num_states();
    let inputs = game.num_inputs();
    let edges: Vec<Vec<Option<Vec<usize>>>> = (0..n)
        .into_par_iter()
        .map(|s| (0..inputs).map(|u| game.successors(s, u)).collect())
        .collect();
    let mut win: Vec<bool> = (0..n).map(&safe).collect();
    let mut history = vec![win.iter().filter(|b| **b).count()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let next: Vec<bool> = (0..n)
            .map(|s| win[s] && edges[s].iter().any(|e| e.as_ref().is_some_and(|succ| succ.iter().all(|&t| win[t]))))
            .collect();
        let changed = next != win;
        win = next;
        history.push(win.iter().filter(|b| **b).count());
        if !changed {
            break;
        }
    }
    let mut allowed = BTreeMap::new();
    let winning: Vec<usize> = (0..n).filter(|&s| win[s]).collect();
    for &s in &winning {
        let ok: Vec<usize> = (0..inputs)
            .filter(|&u| edges[s][u].as_ref().is_some_and(|succ| succ.iter().all(|&t| win[t])))
            .collect();
        allowed.insert(s, ok);
    }
    SafetyController {
        winning,
        allowed,
        iterations,
        history,
    }
}
