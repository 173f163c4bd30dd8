//! Impulsive subsystems, their network, and the system definition file.
//!
//! A system definition file is TOML:
//!
//! ```toml
//! format_version = 1
//!
//! [[subsystem]]
//! name = "left"                  # optional
//! n = 1                          # state dimension
//! q = 1                          # internal input dimension
//! m = 1                          # external input dimension
//! state_bounds = [[0.0, 1.0]]    # one [lo, hi] pair per dimension
//! internal_bounds = [[0.0, 1.0]]
//! external_bounds = [[0.0, 0.2]]
//! flow = ["-x1 + 0.5*w1 + u1"]   # one expression per state component
//! jump = ["0.5*x1"]
//! tau = 0.1                      # sampling period, shared by all subsystems
//! z_min = 1                      # jumps are z_min..=z_max periods apart
//! z_max = 2
//! phi = 0.1                      # bound on internal-input variation within a period
//!
//! [network]
//! coupling = [0.0, 1.0, 1.0, 0.0]  # row-major, (total q) x (total n)
//! coupling_shape = [2, 2]          # optional; inferred when omitted
//! phi_slack = [0.05, 0.05]         # optional internal matching tolerances
//! ```

use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::dsl::{Arity, DslError, VectorField};
use crate::grid::BoxSet;

pub const SYSTEM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: subsystem {subsystem}: {what} expression: {source}")]
    Expression {
        line: usize,
        subsystem: usize,
        what: &'static str,
        source: DslError,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("unsupported system format version {0} (expected {SYSTEM_FORMAT_VERSION})")]
    Version(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One impulsive subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemSpec {
    pub name: String,
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub state_bounds: BoxSet,
    pub internal_bounds: BoxSet,
    pub external_bounds: BoxSet,
    pub flow: VectorField,
    pub jump: VectorField,
    pub tau: f64,
    pub z_min: u32,
    pub z_max: u32,
    pub phi: f64,
}

impl SubsystemSpec {
    pub fn arity(&self) -> Arity {
        Arity {
            n: self.n,
            q: self.q,
            m: self.m,
        }
    }
}

/// A network of subsystems coupled through `ω = M·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub subsystems: Vec<SubsystemSpec>,
    pub coupling: DMatrix<f64>,
    pub phi_slack: Option<Vec<f64>>,
}

/// Continuous state plus the counter of periods since the last jump.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub x: Vec<f64>,
    pub c: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Dimension,
    DegenerateBounds,
    Dwell,
    Sampling,
    CouplingShape,
    CouplingRange,
    Slack,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subsystem: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, subsystem: Option<usize>, message: String) {
        self.violations.push(Violation {
            kind,
            subsystem,
            message,
        });
    }
}

impl NetworkSpec {
    pub fn total_n(&self) -> usize {
        self.subsystems.iter().map(|s| s.n).sum()
    }

    pub fn total_q(&self) -> usize {
        self.subsystems.iter().map(|s| s.q).sum()
    }

    pub fn total_m(&self) -> usize {
        self.subsystems.iter().map(|s| s.m).sum()
    }

    /// Start offsets of each subsystem's block in the global state vector.
    pub fn state_offsets(&self) -> Vec<usize> {
        prefix(self.subsystems.iter().map(|s| s.n))
    }

    pub fn internal_offsets(&self) -> Vec<usize> {
        prefix(self.subsystems.iter().map(|s| s.q))
    }

    pub fn external_offsets(&self) -> Vec<usize> {
        prefix(self.subsystems.iter().map(|s| s.m))
    }

    pub fn state_box(&self) -> BoxSet {
        BoxSet::product(self.subsystems.iter().map(|s| &s.state_bounds))
    }

    /// Common sampling period (the first subsystem's; validation flags disagreement).
    pub fn tau(&self) -> f64 {
        self.subsystems.first().map(|s| s.tau).unwrap_or(0.0)
    }

    /// Internal matching tolerances: explicit values, or the supplied defaults.
    pub fn resolved_slack(&self, defaults: &[f64]) -> Vec<f64> {
        self.phi_slack.clone().unwrap_or_else(|| defaults.to_vec())
    }

    pub fn from_toml_str(text: &str) -> Result<NetworkSpec, ModelError> {
        parse_system(text)
    }
}

fn prefix(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

/// Structural and numeric checks; the network's own slack (or zero) inflates the internal boxes.
pub fn validate_network(spec: &NetworkSpec) -> ValidationReport {
    let slack = spec
        .phi_slack
        .clone()
        .unwrap_or_else(|| vec![0.0; spec.subsystems.len()]);
    validate_network_with_slack(spec, &slack)
}

pub fn validate_network_with_slack(spec: &NetworkSpec, slack: &[f64]) -> ValidationReport {
    let mut r = ValidationReport::default();
    if spec.subsystems.is_empty() {
        r.push(ViolationKind::Dimension, None, "network has no subsystems".into());
        return r;
    }
    let tau0 = spec.subsystems[0].tau;
    for (i, s) in spec.subsystems.iter().enumerate() {
        let at = Some(i);
        if s.n == 0 || s.q == 0 || s.m == 0 {
            r.push(ViolationKind::Dimension, at, format!("dimensions must be positive, got n={} q={} m={}", s.n, s.q, s.m));
        }
        for (what, b, d) in [
            ("state_bounds", &s.state_bounds, s.n),
            ("internal_bounds", &s.internal_bounds, s.q),
            ("external_bounds", &s.external_bounds, s.m),
        ] {
            if b.dim() != d {
                r.push(ViolationKind::Dimension, at, format!("{what} has {} intervals, expected {d}", b.dim()));
            }
            if let Err(e) = b.validate() {
                r.push(ViolationKind::DegenerateBounds, at, format!("{what}: {e}"));
            }
        }
        if s.flow.arity() != s.arity() || s.jump.arity() != s.arity() {
            r.push(ViolationKind::Dimension, at, "flow/jump arity differs from (n, q, m)".into());
        }
        if s.z_min < 1 || s.z_min > s.z_max {
            r.push(ViolationKind::Dwell, at, format!("need 1 <= z_min <= z_max, got z_min={} z_max={}", s.z_min, s.z_max));
        }
        if !(s.tau > 0.0) || !s.tau.is_finite() {
            r.push(ViolationKind::Sampling, at, format!("tau must be positive, got {}", s.tau));
        } else if s.tau != tau0 {
            r.push(ViolationKind::Sampling, at, format!("tau {} differs from the network tau {tau0}; a common sampling period is required", s.tau));
        }
        if !(s.phi >= 0.0) {
            r.push(ViolationKind::Sampling, at, format!("phi must be nonnegative, got {}", s.phi));
        }
    }
    let (rows, cols) = spec.coupling.shape();
    if rows != spec.total_q() || cols != spec.total_n() {
        r.push(
            ViolationKind::CouplingShape,
            None,
            format!("coupling matrix is {rows}x{cols}, expected {}x{}", spec.total_q(), spec.total_n()),
        );
        return r;
    }
    if slack.len() != spec.subsystems.len() || slack.iter().any(|p| !(*p >= 0.0)) {
        r.push(ViolationKind::Slack, None, format!("phi_slack must hold {} nonnegative values", spec.subsystems.len()));
        return r;
    }
    if !r.is_valid() {
        return r;
    }
    // Range of each row of M over the state box: the extremes sit at box vertices.
    let xbox = spec.state_box();
    let offsets = spec.internal_offsets();
    for (i, s) in spec.subsystems.iter().enumerate() {
        for j in 0..s.q {
            let row = offsets[i] + j;
            let (mut lo, mut hi) = (0.0, 0.0);
            for c in 0..cols {
                let a = spec.coupling[(row, c)];
                let (p, q) = (a * xbox.lo(c), a * xbox.hi(c));
                lo += p.min(q);
                hi += p.max(q);
            }
            let (wl, wh) = (s.internal_bounds.lo(j) - slack[i], s.internal_bounds.hi(j) + slack[i]);
            let tol = 1e-12 * (1.0 + wl.abs().max(wh.abs()));
            if lo < wl - tol || hi > wh + tol {
                r.push(
                    ViolationKind::CouplingRange,
                    Some(i),
                    format!("internal input {} ranges over [{lo}, {hi}] but the inflated internal box is [{wl}, {wh}]", j + 1),
                );
            }
        }
    }
    r
}

/// `M·x`, split into per-subsystem internal input vectors.
pub fn coupling_image(spec: &NetworkSpec, x: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
    let (rows, cols) = spec.coupling.shape();
    if x.len() != cols {
        return Err(ModelError::Dimension {
            expected: cols,
            got: x.len(),
        });
    }
    if rows != spec.total_q() {
        return Err(ModelError::Dimension {
            expected: spec.total_q(),
            got: rows,
        });
    }
    let mut flat = vec![0.0; rows];
    mat_vec(&spec.coupling, x, &mut flat);
    let offsets = spec.internal_offsets();
    Ok(spec
        .subsystems
        .iter()
        .zip(offsets)
        .map(|(s, o)| flat[o..o + s.q].to_vec())
        .collect())
}

/// `out = M·x` with a fixed summation order.
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (r, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xv) in x.iter().enumerate() {
            acc += m[(r, c)] * xv;
        }
        *slot = acc;
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    format_version: Spanned<u32>,
    subsystem: Vec<Spanned<RawSubsystem>>,
    network: Spanned<RawNetwork>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubsystem {
    name: Option<String>,
    n: usize,
    q: usize,
    m: usize,
    state_bounds: Vec<[f64; 2]>,
    internal_bounds: Vec<[f64; 2]>,
    external_bounds: Vec<[f64; 2]>,
    flow: Spanned<Vec<Spanned<String>>>,
    jump: Spanned<Vec<Spanned<String>>>,
    tau: f64,
    z_min: u32,
    z_max: u32,
    #[serde(default)]
    phi: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    coupling: Spanned<Vec<f64>>,
    coupling_shape: Option<[usize; 2]>,
    phi_slack: Option<Vec<f64>>,
}

pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> ModelError {
    let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
    ModelError::Syntax {
        line,
        message: e.message().to_string(),
    }
}

fn parse_field(
    text: &str,
    exprs: &Spanned<Vec<Spanned<String>>>,
    arity: Arity,
    subsystem: usize,
    what: &'static str,
) -> Result<VectorField, ModelError> {
    let mut comps = Vec::with_capacity(exprs.get_ref().len());
    for e in exprs.get_ref() {
        let parsed = crate::dsl::parse_expr(e.get_ref()).map_err(|err| ModelError::Expression {
            line: line_of(text, e.span().start),
            subsystem,
            what,
            source: err.into(),
        })?;
        comps.push(parsed);
    }
    VectorField::new(comps, arity).map_err(|source| ModelError::Expression {
        line: line_of(text, exprs.span().start),
        subsystem,
        what,
        source,
    })
}

fn parse_system(text: &str) -> Result<NetworkSpec, ModelError> {
    let raw: RawFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    if *raw.format_version.get_ref() != SYSTEM_FORMAT_VERSION {
        return Err(ModelError::Version(*raw.format_version.get_ref()));
    }
    let mut subsystems = Vec::with_capacity(raw.subsystem.len());
    for (i, s) in raw.subsystem.into_iter().enumerate() {
        let s = s.into_inner();
        let arity = Arity { n: s.n, q: s.q, m: s.m };
        let flow = parse_field(text, &s.flow, arity, i, "flow")?;
        let jump = parse_field(text, &s.jump, arity, i, "jump")?;
        subsystems.push(SubsystemSpec {
            name: s.name.unwrap_or_else(|| format!("s{}", i + 1)),
            n: s.n,
            q: s.q,
            m: s.m,
            state_bounds: BoxSet(s.state_bounds),
            internal_bounds: BoxSet(s.internal_bounds),
            external_bounds: BoxSet(s.external_bounds),
            flow,
            jump,
            tau: s.tau,
            z_min: s.z_min,
            z_max: s.z_max,
            phi: s.phi,
        });
    }
    let net = raw.network.into_inner();
    let data = net.coupling.get_ref();
    let (rows, cols) = match net.coupling_shape {
        Some([r, c]) => (r, c),
        None => {
            let q: usize = subsystems.iter().map(|s| s.q).sum();
            let n: usize = subsystems.iter().map(|s| s.n).sum();
            (q, n)
        }
    };
    if rows * cols != data.len() {
        return Err(ModelError::Schema {
            line: line_of(text, net.coupling.span().start),
            message: format!("coupling has {} entries, shape {rows}x{cols} needs {}", data.len(), rows * cols),
        });
    }
    Ok(NetworkSpec {
        subsystems,
        coupling: DMatrix::from_row_slice(rows, cols, data),
        phi_slack: net.phi_slack,
    })
}
