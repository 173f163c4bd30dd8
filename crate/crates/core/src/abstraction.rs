//! Sampled-data transition semantics and the finite abstraction.
//!
//! Abstract states are `(cell, counter)` pairs. From counter `c` a flow
//! transition is admissible when `c < z_max` and leads to counter `c + 1`; a jump
//! is admissible when `z_min <= c <= z_max` and resets the counter to 0.
//!
//! The continuous successor of a cell depends only on the cell point and the
//! input points, not on the counter, so the table stores one successor array per
//! `(cell, ω̂, û, mode)` and [`TransitionTable::successors`] attaches counters.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{apply_jump, integrate_flow, FlowError, IntegratorConfig};
use crate::grid::{Grid, GridError, GridParams};
use crate::model::{HybridState, SubsystemSpec};

pub const TABLE_FORMAT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 8] = b"IMPABSTB";
/// Blocked triples listed individually in a build report; the count is always exact.
pub const BLOCKED_LISTING_CAP: usize = 1000;

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{mode:?} is not admissible at counter {counter} (z_min = {z_min}, z_max = {z_max})")]
    InadmissibleMode {
        mode: Mode,
        counter: u32,
        z_min: u32,
        z_max: u32,
    },
    #[error("table format: {0}")]
    Format(String),
    #[error("unsupported table format version {0} (expected {TABLE_FORMAT_VERSION})")]
    Version(u32),
    #[error("table does not match the subsystem: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flow,
    Jump,
}

impl Mode {
    fn slot(self) -> usize {
        match self {
            Mode::Flow => 0,
            Mode::Jump => 1,
        }
    }

    pub fn is_admissible(self, counter: u32, z_min: u32, z_max: u32) -> bool {
        match self {
            Mode::Flow => counter < z_max,
            Mode::Jump => counter >= z_min && counter <= z_max,
        }
    }

    pub fn next_counter(self, counter: u32) -> u32 {
        match self {
            Mode::Flow => counter + 1,
            Mode::Jump => 0,
        }
    }
}

/// Modes admissible at `counter`, flow first.
pub fn admissible_modes(counter: u32, z_min: u32, z_max: u32) -> Vec<Mode> {
    [Mode::Flow, Mode::Jump]
        .into_iter()
        .filter(|m| m.is_admissible(counter, z_min, z_max))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AbstractState {
    pub cell: u32,
    pub counter: u32,
}

/// One transition of the sampled-data system from `state` under constant inputs.
pub fn concrete_step(
    spec: &SubsystemSpec,
    state: &HybridState,
    w: &[f64],
    u: &[f64],
    mode: Mode,
    config: &IntegratorConfig,
) -> Result<HybridState, AbstractionError> {
    if !mode.is_admissible(state.c, spec.z_min, spec.z_max) {
        return Err(AbstractionError::InadmissibleMode {
            mode,
            counter: state.c,
            z_min: spec.z_min,
            z_max: spec.z_max,
        });
    }
    let x = match mode {
        Mode::Flow => integrate_flow(&spec.flow, &state.x, w, u, spec.tau, config)?,
        Mode::Jump => apply_jump(&spec.jump, &state.x, w, u)?,
    };
    Ok(HybridState {
        x,
        c: mode.next_counter(state.c),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub format_version: u32,
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub tau: f64,
    pub z_min: u32,
    pub z_max: u32,
    pub state_grid: GridParams,
    pub internal_grid: GridParams,
    pub external_grid: GridParams,
    pub integrator: IntegratorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    header: TableHeader,
    state_grid: Grid,
    internal_grid: Grid,
    external_grid: Grid,
    // CSR layout over slots ((cell * |W| + w) * |U| + u) * 2 + mode
    offsets: Vec<u32>,
    cells: Vec<u32>,
}

/// Successor set with a flag for empty (blocking) triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Successors {
    pub states: Vec<AbstractState>,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockedTriple {
    pub cell: u32,
    pub w: u32,
    pub u: u32,
    pub mode: Mode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub cells: usize,
    pub counters: usize,
    pub abstract_states: usize,
    pub internal_points: usize,
    pub external_points: usize,
    pub entries: usize,
    pub stored_successors: usize,
    pub blocked_count: usize,
    pub blocked: Vec<BlockedTriple>,
    /// out-degree → number of (cell, ω̂, û, mode) entries
    pub out_degree_histogram: BTreeMap<usize, usize>,
    pub min_out_degree: usize,
    pub max_out_degree: usize,
}

impl TransitionTable {
    pub fn header(&self) -> &TableHeader {
        &self.header
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    pub fn internal_grid(&self) -> &Grid {
        &self.internal_grid
    }

    pub fn external_grid(&self) -> &Grid {
        &self.external_grid
    }

    pub fn z_min(&self) -> u32 {
        self.header.z_min
    }

    pub fn z_max(&self) -> u32 {
        self.header.z_max
    }

    pub fn num_abstract_states(&self) -> usize {
        self.state_grid.len() * (self.header.z_max as usize + 1)
    }

    fn slot(&self, cell: usize, w: usize, u: usize, mode: Mode) -> usize {
        ((cell * self.internal_grid.len() + w) * self.external_grid.len() + u) * 2 + mode.slot()
    }

    fn indices_valid(&self, cell: usize, w: usize, u: usize) -> bool {
        cell < self.state_grid.len() && w < self.internal_grid.len() && u < self.external_grid.len()
    }

    /// Stored successor cells for one mode (counter-independent).
    pub fn mode_cells(&self, cell: usize, w: usize, u: usize, mode: Mode) -> &[u32] {
        if !self.indices_valid(cell, w, u) {
            return &[];
        }
        let s = self.slot(cell, w, u, mode);
        &self.cells[self.offsets[s] as usize..self.offsets[s + 1] as usize]
    }

    /// All successors of `state` under `(ω̂, û)`, sorted by `(cell, counter)`.
    pub fn successors(&self, state: AbstractState, w: usize, u: usize) -> Successors {
        let (z_min, z_max) = (self.header.z_min, self.header.z_max);
        if !self.indices_valid(state.cell as usize, w, u) || state.counter > z_max {
            return Successors {
                states: Vec::new(),
                blocked: true,
            };
        }
        let mut states = Vec::new();
        for mode in admissible_modes(state.counter, z_min, z_max) {
            let counter = mode.next_counter(state.counter);
            states.extend(
                self.mode_cells(state.cell as usize, w, u, mode)
                    .iter()
                    .map(|&cell| AbstractState { cell, counter }),
            );
        }
        states.sort_unstable();
        states.dedup();
        let blocked = states.is_empty();
        Successors { states, blocked }
    }

    /// Every `(cell, ω̂, û, mode)` entry with its successor cells, in key order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, Mode, &[u32])> + '_ {
        let (nw, nu) = (self.internal_grid.len(), self.external_grid.len());
        (0..self.state_grid.len()).flat_map(move |c| {
            (0..nw).flat_map(move |w| {
                (0..nu).flat_map(move |u| {
                    [Mode::Flow, Mode::Jump]
                        .into_iter()
                        .map(move |m| (c, w, u, m, self.mode_cells(c, w, u, m)))
                })
            })
        })
    }

    /// Confirms the header agrees with `spec` (dimensions, period, dwell bounds).
    pub fn check_against(&self, spec: &SubsystemSpec) -> Result<(), AbstractionError> {
        let h = &self.header;
        let mut problems = Vec::new();
        if (h.n, h.q, h.m) != (spec.n, spec.q, spec.m) {
            problems.push(format!("dimensions ({}, {}, {}) vs ({}, {}, {})", h.n, h.q, h.m, spec.n, spec.q, spec.m));
        }
        if h.tau != spec.tau {
            problems.push(format!("tau {} vs {}", h.tau, spec.tau));
        }
        if (h.z_min, h.z_max) != (spec.z_min, spec.z_max) {
            problems.push(format!("dwell bounds ({}, {}) vs ({}, {})", h.z_min, h.z_max, spec.z_min, spec.z_max));
        }
        if h.state_grid.bounds != spec.state_bounds
            || h.internal_grid.bounds != spec.internal_bounds
            || h.external_grid.bounds != spec.external_bounds
        {
            problems.push("grid bounds differ from the subsystem's sets".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AbstractionError::Mismatch(problems.join("; ")))
        }
    }

    fn from_parts(header: TableHeader, offsets: Vec<u32>, cells: Vec<u32>) -> Result<Self, AbstractionError> {
        if header.format_version != TABLE_FORMAT_VERSION {
            return Err(AbstractionError::Version(header.format_version));
        }
        let state_grid = Grid::from_params(&header.state_grid)?;
        let internal_grid = Grid::from_params(&header.internal_grid)?;
        let external_grid = Grid::from_params(&header.external_grid)?;
        let slots = state_grid.len() * internal_grid.len() * external_grid.len() * 2;
        if offsets.len() != slots + 1 || offsets[0] != 0 || *offsets.last().unwrap() as usize != cells.len() {
            return Err(AbstractionError::Format("offset array does not match the grids".into()));
        }
        for s in 0..slots {
            let (a, b) = (offsets[s] as usize, offsets[s + 1] as usize);
            if a > b {
                return Err(AbstractionError::Format("offsets not monotone".into()));
            }
            let run = &cells[a..b];
            if run.windows(2).any(|p| p[0] >= p[1]) || run.iter().any(|&c| c as usize >= state_grid.len()) {
                return Err(AbstractionError::Format(format!("successor list {s} unsorted or out of range")));
            }
        }
        Ok(TransitionTable {
            header,
            state_grid,
            internal_grid,
            external_grid,
            offsets,
            cells,
        })
    }

    pub fn to_json(&self) -> Result<String, AbstractionError> {
        let entries = self
            .entries()
            .map(|(cell, w, u, mode, succ)| JsonEntry {
                cell: cell as u32,
                w: w as u32,
                u: u as u32,
                mode,
                successors: succ.to_vec(),
            })
            .collect();
        let doc = JsonTable {
            header: self.header.clone(),
            entries,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, AbstractionError> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = probe.pointer("/header/format_version").and_then(|v| v.as_u64()) {
            if v != TABLE_FORMAT_VERSION as u64 {
                return Err(AbstractionError::Version(v as u32));
            }
        }
        let doc: JsonTable = serde_json::from_value(probe)?;
        let h = &doc.header;
        let nw = Grid::from_params(&h.internal_grid)?.len();
        let nu = Grid::from_params(&h.external_grid)?.len();
        let ns = Grid::from_params(&h.state_grid)?.len();
        let slots = ns * nw * nu * 2;
        if doc.entries.len() != slots {
            return Err(AbstractionError::Format(format!("expected {slots} entries, found {}", doc.entries.len())));
        }
        let mut offsets = Vec::with_capacity(slots + 1);
        let mut cells = Vec::new();
        offsets.push(0u32);
        for (i, e) in doc.entries.iter().enumerate() {
            let key = ((e.cell as usize * nw + e.w as usize) * nu + e.u as usize) * 2 + e.mode.slot();
            if key != i {
                return Err(AbstractionError::Format(format!("entry {i} out of key order")));
            }
            cells.extend_from_slice(&e.successors);
            offsets.push(cells.len() as u32);
        }
        Self::from_parts(doc.header, offsets, cells)
    }

    /// Compact binary form with the same logical content as the JSON form.
    pub fn to_bytes(&self) -> Result<Vec<u8>, AbstractionError> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(32 + header.len() + 4 * (self.offsets.len() + self.cells.len()));
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&TABLE_FORMAT_VERSION.to_le_bytes());
        for block in [&header[..]] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(block);
        }
        for arr in [&self.offsets, &self.cells] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbstractionError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != BINARY_MAGIC {
            return Err(AbstractionError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != TABLE_FORMAT_VERSION {
            return Err(AbstractionError::Version(version));
        }
        let hlen = r.u64()? as usize;
        let header: TableHeader = serde_json::from_slice(r.take(hlen)?)?;
        let offsets = r.u32_array()?;
        let cells = r.u32_array()?;
        if r.pos != bytes.len() {
            return Err(AbstractionError::Format("trailing bytes".into()));
        }
        Self::from_parts(header, offsets, cells)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AbstractionError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| AbstractionError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, AbstractionError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32_array(&mut self) -> Result<Vec<u32>, AbstractionError> {
        let len = self.u64()? as usize;
        let raw = self.take(len.checked_mul(4).ok_or_else(|| AbstractionError::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    cell: u32,
    w: u32,
    u: u32,
    mode: Mode,
    successors: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct JsonTable {
    header: TableHeader,
    entries: Vec<JsonEntry>,
}

/// Quantization parameters of one subsystem's abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    pub eta_x: f64,
    pub eta_w: f64,
    pub eta_u: f64,
}

/// Builds the finite abstraction of `spec`.
///
/// For every cell, internal point and external point, the flow successor is the
/// RK4 endpoint under constant inputs and the jump successor is `g(x̂, ω̂, û)`;
/// the recorded successor cells are all grid points within `η^x` of it in the
/// infinity norm. Empty successor sets (the successor left the state box, or
/// integration failed) are kept as blocked entries and listed in the report.
pub fn build_abstraction(
    spec: &SubsystemSpec,
    quant: Quantization,
    config: &IntegratorConfig,
) -> Result<(TransitionTable, BuildReport), AbstractionError> {
    let state_grid = Grid::new(spec.state_bounds.clone(), quant.eta_x)?;
    let internal_grid = Grid::new(spec.internal_bounds.clone(), quant.eta_w)?;
    let external_grid = Grid::new(spec.external_bounds.clone(), quant.eta_u)?;
    config.steps_for(spec.tau)?;
    let (nw, nu) = (internal_grid.len(), external_grid.len());

    type Slot = (Vec<u32>, Option<String>);
    let per_cell: Vec<Vec<Slot>> = (0..state_grid.len())
        .into_par_iter()
        .map(|cell| {
            let x = state_grid.point(cell);
            let mut w = vec![0.0; spec.q];
            let mut u = vec![0.0; spec.m];
            let mut slots = Vec::with_capacity(nw * nu * 2);
            for wi in 0..nw {
                internal_grid.point_into(wi, &mut w);
                for ui in 0..nu {
                    external_grid.point_into(ui, &mut u);
                    let flow = integrate_flow(&spec.flow, &x, &w, &u, spec.tau, config);
                    let jump = apply_jump(&spec.jump, &x, &w, &u);
                    for result in [flow, jump] {
                        slots.push(match result {
                            Ok(y) => {
                                let succ: Vec<u32> = state_grid.ball_points(&y, quant.eta_x).into_iter().map(|c| c as u32).collect();
                                let reason = succ.is_empty().then(|| format!("successor {y:?} has no cell within eta_x"));
                                (succ, reason)
                            }
                            Err(e) => (Vec::new(), Some(e.to_string())),
                        });
                    }
                }
            }
            slots
        })
        .collect();

    let mut offsets = Vec::with_capacity(state_grid.len() * nw * nu * 2 + 1);
    let mut cells = Vec::new();
    let mut histogram = BTreeMap::new();
    let mut blocked = Vec::new();
    let mut blocked_count = 0;
    offsets.push(0u32);
    for (cell, slots) in per_cell.into_iter().enumerate() {
        for (k, (succ, reason)) in slots.into_iter().enumerate() {
            *histogram.entry(succ.len()).or_insert(0) += 1;
            if let Some(reason) = reason {
                blocked_count += 1;
                if blocked.len() < BLOCKED_LISTING_CAP {
                    blocked.push(BlockedTriple {
                        cell: cell as u32,
                        w: (k / 2 / nu) as u32,
                        u: (k / 2 % nu) as u32,
                        mode: if k % 2 == 0 { Mode::Flow } else { Mode::Jump },
                        reason,
                    });
                }
            }
            cells.extend(succ);
            offsets.push(cells.len() as u32);
        }
    }
    let header = TableHeader {
        format_version: TABLE_FORMAT_VERSION,
        n: spec.n,
        q: spec.q,
        m: spec.m,
        tau: spec.tau,
        z_min: spec.z_min,
        z_max: spec.z_max,
        state_grid: state_grid.params(),
        internal_grid: internal_grid.params(),
        external_grid: external_grid.params(),
        integrator: *config,
    };
    let counters = spec.z_max as usize + 1;
    let report = BuildReport {
        cells: state_grid.len(),
        counters,
        abstract_states: state_grid.len() * counters,
        internal_points: nw,
        external_points: nu,
        entries: offsets.len() - 1,
        stored_successors: cells.len(),
        blocked_count,
        blocked,
        min_out_degree: histogram.keys().next().copied().unwrap_or(0),
        max_out_degree: histogram.keys().next_back().copied().unwrap_or(0),
        out_degree_histogram: histogram,
    };
    let table = TransitionTable {
        header,
        state_grid,
        internal_grid,
        external_grid,
        offsets,
        cells,
    };
    Ok((table, report))
}
