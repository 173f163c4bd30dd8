//! Interconnection of subsystem abstractions and of their simulation functions.
//!
//! A composed state is one abstract state per subsystem. Each subsystem picks
//! flow or jump from its own counter. Internal inputs are resolved against the
//! coupling: subsystem `i` may use any internal grid point `ω̂_i` with
//! `‖ω̂_i − (M·x̂)_i‖∞ ≤ Φ_i`, and the composed successor set is the product over
//! subsystems of the union over those choices.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{admissible_modes, AbstractState, Mode, TransitionTable};
use crate::certificate::{CertificateError, KInfFn, LocalSimFn};
use crate::dsl::DslError;
use crate::flow::{apply_jump, integrate_network, FlowError, IntegratorConfig};
use crate::model::{mat_vec, HybridState, NetworkSpec};

/// Added to every `Φ_i` so that exact lattice hits survive rounding.
pub const PHI_ROUNDING: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("counter mismatch in subsystem {subsystem}: concrete {concrete}, abstract {abstract_}")]
    CounterMismatch { subsystem: usize, concrete: u32, abstract_: u32 },
    #[error("negative weight mu[{index}] = {value}")]
    NegativeMu { index: usize, value: f64 },
    #[error("global lower bound: {0}")]
    Alpha(String),
    #[error("{count} composed states exceed the cap of {cap}")]
    CapExceeded { count: u128, cap: usize },
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Dsl(#[from] DslError),
}

pub type ComposedState = Vec<AbstractState>;

#[derive(Debug, Clone)]
pub struct ComposedSystem {
    tables: Vec<TransitionTable>,
    coupling: DMatrix<f64>,
    phi: Vec<f64>,
    n_off: Vec<usize>,
    q_off: Vec<usize>,
}

/// Successors of one composed state under one external input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSuccessors {
    /// Product of the per-subsystem sets, last subsystem varying fastest.
    pub states: Vec<ComposedState>,
    /// Admissible internal grid indices per subsystem.
    pub omega_choices: Vec<Vec<usize>>,
    /// Subsystem whose internal selection or successor set came up empty.
    pub blocked: Option<(usize, String)>,
}

fn offsets(sizes: impl Iterator<Item = usize>) -> (Vec<usize>, usize) {
    let mut acc = 0;
    let o = sizes
        .map(|s| {
            let v = acc;
            acc += s;
            v
        })
        .collect();
    (o, acc)
}

impl ComposedSystem {
    pub fn new(tables: Vec<TransitionTable>, coupling: DMatrix<f64>, phi: Vec<f64>) -> Result<Self, ComposeError> {
        let (n_off, n_tot) = offsets(tables.iter().map(|t| t.header().n));
        let (q_off, q_tot) = offsets(tables.iter().map(|t| t.header().q));
        if coupling.shape() != (q_tot, n_tot) {
            return Err(ComposeError::Dimension {
                what: "coupling matrix".into(),
                expected: q_tot * n_tot,
                got: coupling.nrows() * coupling.ncols(),
            });
        }
        if phi.len() != tables.len() {
            return Err(ComposeError::Dimension {
                what: "internal matching tolerances".into(),
                expected: tables.len(),
                got: phi.len(),
            });
        }
        Ok(ComposedSystem {
            tables,
            coupling,
            phi,
            n_off,
            q_off,
        })
    }

    pub fn tables(&self) -> &[TransitionTable] {
        &self.tables
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Concatenated grid points of the cells.
    pub fn abstract_point(&self, cells: &[u32]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_off.last().map_or(0, |o| o + self.tables.last().unwrap().header().n)];
        for (i, t) in self.tables.iter().enumerate() {
            let n = t.header().n;
            t.state_grid().point_into(cells[i] as usize, &mut x[self.n_off[i]..self.n_off[i] + n]);
        }
        x
    }

    /// Internal grid indices within `Φ_i` of `(M·x̂)_i` for every subsystem.
    pub fn omega_choices(&self, cells: &[u32]) -> Vec<Vec<usize>> {
        let x = self.abstract_point(cells);
        let mut w = vec![0.0; self.coupling.nrows()];
        mat_vec(&self.coupling, &x, &mut w);
        self.tables
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let q = t.header().q;
                t.internal_grid()
                    .ball_points(&w[self.q_off[i]..self.q_off[i] + q], self.phi[i] + PHI_ROUNDING)
            })
            .collect()
    }

    /// Per-subsystem successor sets: union over admissible `ω̂_i`.
    pub fn local_successors(&self, state: &[AbstractState], u: &[usize]) -> (Vec<Vec<AbstractState>>, Vec<Vec<usize>>, Option<(usize, String)>) {
        let cells: Vec<u32> = state.iter().map(|s| s.cell).collect();
        let choices = self.omega_choices(&cells);
        let mut blocked = None;
        let mut sets = Vec::with_capacity(self.len());
        for (i, t) in self.tables.iter().enumerate() {
            if choices[i].is_empty() {
                blocked.get_or_insert((i, "no internal grid point within the matching tolerance".to_string()));
                sets.push(Vec::new());
                continue;
            }
            let mut set: Vec<AbstractState> = choices[i]
                .iter()
                .flat_map(|&w| t.successors(state[i], w, u[i]).states)
                .collect();
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                blocked.get_or_insert((i, "empty successor set".to_string()));
            }
            sets.push(set);
        }
        (sets, choices, blocked)
    }

    pub fn composed_successors(&self, state: &[AbstractState], u: &[usize]) -> ComposedSuccessors {
        let (sets, omega_choices, blocked) = self.local_successors(state, u);
        let states = if blocked.is_some() { Vec::new() } else { cross_product(&sets) };
        ComposedSuccessors {
            states,
            omega_choices,
            blocked,
        }
    }

    /// All external input index vectors, last subsystem fastest.
    pub fn input_combinations(&self) -> Vec<Vec<usize>> {
        let sets: Vec<Vec<usize>> = self.tables.iter().map(|t| (0..t.external_grid().len()).collect()).collect();
        cross_product(&sets)
    }

    /// Number of composed abstract states.
    pub fn state_count(&self) -> u128 {
        self.tables
            .iter()
            .fold(1u128, |acc, t| acc.saturating_mul(t.num_abstract_states() as u128))
    }

    /// Mixed-radix id of a composed state (cell-major, counter-minor per subsystem).
    pub fn state_id(&self, state: &[AbstractState]) -> usize {
        let mut id = 0usize;
        for (t, s) in self.tables.iter().zip(state) {
            let local = s.cell as usize * (t.z_max() as usize + 1) + s.counter as usize;
            id = id * t.num_abstract_states() + local;
        }
        id
    }

    pub fn state_from_id(&self, mut id: usize) -> ComposedState {
        let mut out = vec![AbstractState { cell: 0, counter: 0 }; self.len()];
        for (i, t) in self.tables.iter().enumerate().rev() {
            let k = t.num_abstract_states();
            let local = id % k;
            id /= k;
            let z = t.z_max() as usize + 1;
            out[i] = AbstractState {
                cell: (local / z) as u32,
                counter: (local % z) as u32,
            };
        }
        out
    }
}

pub fn cross_product<T: Clone>(sets: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = vec![Vec::with_capacity(sets.len())];
    for set in sets {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect();
    }
    out
}

/// One concrete network period under a mode vector.
///
/// Flowing subsystems integrate with `ω(t) = M·x(t)` while jumping subsystems
/// hold their pre-transition values; jumpers then apply `g_i` to the values
/// at the start of the period.
pub fn network_step(
    spec: &NetworkSpec,
    x: &[f64],
    u: &[f64],
    modes: &[Mode],
    config: &IntegratorConfig,
) -> Result<Vec<f64>, ComposeError> {
    let jumping: Vec<bool> = modes.iter().map(|m| *m == Mode::Jump).collect();
    let mut next = if jumping.iter().all(|j| *j) {
        x.to_vec()
    } else {
        integrate_network(spec, x, u, &jumping, config)?
    };
    if jumping.iter().any(|j| *j) {
        let xo = spec.state_offsets();
        let wo = spec.internal_offsets();
        let uo = spec.external_offsets();
        let mut w = vec![0.0; spec.total_q()];
        mat_vec(&spec.coupling, x, &mut w);
        for (i, s) in spec.subsystems.iter().enumerate().filter(|(i, _)| jumping[*i]) {
            let post = apply_jump(&s.jump, &x[xo[i]..xo[i] + s.n], &w[wo[i]..wo[i] + s.q], &u[uo[i]..uo[i] + s.m])?;
            next[xo[i]..xo[i] + s.n].copy_from_slice(&post);
        }
    }
    Ok(next)
}

/// Every mode vector admissible at the counters, flow-first per subsystem.
pub fn admissible_mode_vectors(counters: &[u32], bounds: &[(u32, u32)]) -> Vec<Vec<Mode>> {
    let sets: Vec<Vec<Mode>> = counters
        .iter()
        .zip(bounds)
        .map(|(&c, &(lo, hi))| admissible_modes(c, lo, hi))
        .collect();
    cross_product(&sets)
}

/// `S̃ = Σ μ_i 𝒱_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSimFn {
    pub mu: Vec<f64>,
    pub locals: Vec<LocalSimFn>,
}

pub fn compose_simfn(mu: Vec<f64>, locals: Vec<LocalSimFn>) -> Result<GlobalSimFn, ComposeError> {
    if mu.len() != locals.len() {
        return Err(ComposeError::Dimension {
            what: "weights".into(),
            expected: locals.len(),
            got: mu.len(),
        });
    }
    for (index, &value) in mu.iter().enumerate() {
        if !(value >= 0.0) {
            return Err(ComposeError::NegativeMu { index, value });
        }
    }
    Ok(GlobalSimFn { mu, locals })
}

impl GlobalSimFn {
    /// `Σ μ_i 𝒱_i((x_i, c_i), (x̂_i, c_i))`; counters must agree pairwise.
    pub fn eval(&self, concrete: &[HybridState], abstract_: &[HybridState]) -> Result<f64, ComposeError> {
        if concrete.len() != self.mu.len() || abstract_.len() != self.mu.len() {
            return Err(ComposeError::Dimension {
                what: "subsystem states".into(),
                expected: self.mu.len(),
                got: concrete.len().min(abstract_.len()),
            });
        }
        let mut total = 0.0;
        for (i, (c, a)) in concrete.iter().zip(abstract_).enumerate() {
            if c.c != a.c {
                return Err(ComposeError::CounterMismatch {
                    subsystem: i,
                    concrete: c.c,
                    abstract_: a.c,
                });
            }
            total += self.mu[i] * self.locals[i].eval(&c.x, &a.x, c.c)?;
        }
        Ok(total)
    }

    /// Same as [`eval`](Self::eval) on flat state vectors with shared counters.
    pub fn eval_flat(&self, x: &[f64], xh: &[f64], counters: &[u32]) -> Result<f64, DslError> {
        let mut total = 0.0;
        let mut o = 0;
        for (i, l) in self.locals.iter().enumerate() {
            let n = l.cert_dim();
            total += self.mu[i] * l.eval(&x[o..o + n], &xh[o..o + n], counters[i])?;
            o += n;
        }
        Ok(total)
    }

    /// `α̃(r) = min_i μ_i a_i · r^p`, for single-term lower bounds sharing one exponent.
    pub fn alpha_tilde(&self) -> Result<KInfFn, ComposeError> {
        let mut coeff = f64::INFINITY;
        let mut exponent = None;
        for (mu, l) in self.mu.iter().zip(&self.locals) {
            let alpha = l.condition1_alpha()?;
            let (a, p) = alpha
                .single_term()
                .ok_or_else(|| ComposeError::Alpha("lower bounds must be single power terms".into()))?;
            match exponent {
                None => exponent = Some(p),
                Some(q) if q != p => return Err(ComposeError::Alpha("lower bounds use different exponents".into())),
                _ => {}
            }
            coeff = coeff.min(mu * a);
        }
        let p = exponent.ok_or_else(|| ComposeError::Alpha("empty network".into()))?;
        if !(coeff > 0.0) {
            return Err(ComposeError::Alpha("a zero weight leaves the state distance unbounded".into()));
        }
        Ok(KInfFn::power(coeff, p)?)
    }
}

/// `ε̂ = α̃⁻¹(max{ρ̃_u(r), ε̃})`.
pub fn deviation_bound(alpha_tilde: &KInfFn, rho_tilde_u: &KInfFn, eps_tilde: f64, r: f64) -> Result<f64, ComposeError> {
    Ok(alpha_tilde.inverse(rho_tilde_u.eval(r).max(eps_tilde))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploredEdge {
    pub from: ComposedState,
    pub u: Vec<usize>,
    pub omega_choices: Vec<Vec<usize>>,
    pub successors: Vec<ComposedState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    pub reachable: usize,
    pub transitions: usize,
    pub blocked: usize,
    /// First blocked `(state, u, subsystem, reason)` tuples.
    pub blocked_examples: Vec<(ComposedState, Vec<usize>, usize, String)>,
    pub edges: Option<Vec<ExploredEdge>>,
}

/// Breadth-first exploration of the composed system from `initial` over every
/// external input combination. Frontiers are expanded in parallel and merged
/// in order, so the result is deterministic.
pub fn explore(sys: &ComposedSystem, initial: &[ComposedState], cap: usize, keep_edges: bool) -> Result<Exploration, ComposeError> {
    let inputs = sys.input_combinations();
    let mut seen: HashMap<ComposedState, ()> = HashMap::new();
    let mut frontier: Vec<ComposedState> = Vec::new();
    for s in initial {
        if seen.insert(s.clone(), ()).is_none() {
            frontier.push(s.clone());
        }
    }
    let mut out = Exploration {
        reachable: 0,
        transitions: 0,
        blocked: 0,
        blocked_examples: Vec::new(),
        edges: keep_edges.then(Vec::new),
    };
    while !frontier.is_empty() {
        let expanded: Vec<Vec<(Vec<usize>, ComposedSuccessors)>> = frontier
            .par_iter()
            .map(|s| inputs.iter().map(|u| (u.clone(), sys.composed_successors(s, u))).collect())
            .collect();
        let mut next = Vec::new();
        for (s, per_input) in frontier.iter().zip(expanded) {
            for (u, succ) in per_input {
                if let Some((i, reason)) = &succ.blocked {
                    out.blocked += 1;
                    if out.blocked_examples.len() < 20 {
                        out.blocked_examples.push((s.clone(), u.clone(), *i, reason.clone()));
                    }
                }
                out.transitions += succ.states.len();
                for t in &succ.states {
                    if !seen.contains_key(t) {
                        if seen.len() >= cap {
                            return Err(ComposeError::CapExceeded {
                                count: seen.len() as u128 + 1,
                                cap,
                            });
                        }
                        seen.insert(t.clone(), ());
                        next.push(t.clone());
                    }
                }
                if let Some(edges) = out.edges.as_mut() {
                    edges.push(ExploredEdge {
                        from: s.clone(),
                        u,
                        omega_choices: succ.omega_choices,
                        successors: succ.states,
                    });
                }
            }
        }
        frontier = next;
    }
    out.reachable = seen.len();
    Ok(out)
}

/// Histogram of composed out-degrees keyed by size, for reports.
pub fn out_degree_summary(exp: &Exploration) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    if let Some(edges) = &exp.edges {
        for e in edges {
            *h.entry(e.successors.len()).or_insert(0) += 1;
        }
    }
    h
}
