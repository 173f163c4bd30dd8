//! Uniform quantization `[S]_η` of hyper-rectangles.
//!
//! Grid points are the integer multiples of `η` that fall inside the box,
//! anchored at the origin rather than at the box corner. Membership uses a
//! relative slack of `1e-9·η` so that e.g. `3 × 0.1` counts as lying in
//! `[0, 0.3]`; stored coordinates are clamped into the box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when deciding whether `k·η` lies in an interval.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("quantization parameter must be positive and finite, got {0}")]
    NonPositiveEta(f64),
    #[error("quantization parameter {eta} exceeds the smallest box width {max}")]
    EtaTooLarge { eta: f64, max: f64 },
    #[error("degenerate interval [{lo}, {hi}] in dimension {dim}")]
    Degenerate { dim: usize, lo: f64, hi: f64 },
    #[error("box has no dimensions")]
    Empty,
    #[error("point has dimension {got}, grid has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("coordinate {value} in dimension {dim} is farther than η/2 outside [{lo}, {hi}]")]
    OutOfRange { dim: usize, value: f64, lo: f64, hi: f64 },
    #[error("grid would have {0} points, exceeding addressable size")]
    TooLarge(u128),
}

/// A closed hyper-rectangle `∏ [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxSet(pub Vec<[f64; 2]>);

impl BoxSet {
    pub fn new(intervals: Vec<[f64; 2]>) -> Self {
        BoxSet(intervals)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn lo(&self, d: usize) -> f64 {
        self.0[d][0]
    }

    pub fn hi(&self, d: usize) -> f64 {
        self.0[d][1]
    }

    /// Smallest side length.
    pub fn min_width(&self) -> f64 {
        self.0.iter().map(|[l, h]| (h - l).abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.0.is_empty() {
            return Err(GridError::Empty);
        }
        for (dim, &[lo, hi]) in self.0.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(GridError::Degenerate { dim, lo, hi });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.0).all(|(v, [l, h])| *v >= *l && *v <= *h)
    }

    /// Concatenation of boxes (product set).
    pub fn product<'a>(parts: impl IntoIterator<Item = &'a BoxSet>) -> BoxSet {
        BoxSet(parts.into_iter().flat_map(|b| b.0.iter().copied()).collect())
    }

    /// All `2^dim` corner points.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| (0..d).map(|i| self.0[i][(mask >> i) & 1]).collect())
            .collect()
    }
}

/// Serializable description of a grid; the grid itself is always rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub bounds: BoxSet,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    bounds: BoxSet,
    eta: f64,
    k_min: Vec<i64>,
    counts: Vec<usize>,
    // axis[d][j] = coordinate of the j-th point along dimension d
    axes: Vec<Vec<f64>>,
    len: usize,
}

fn in_interval(k: i64, eta: f64, lo: f64, hi: f64) -> bool {
    let v = k as f64 * eta;
    let slack = MEMBERSHIP_SLACK * eta;
    v >= lo - slack && v <= hi + slack
}

impl Grid {
    /// A zero-dimensional box yields the one-point grid (subsystems without internal inputs).
    pub fn new(bounds: BoxSet, eta: f64) -> Result<Grid, GridError> {
        if bounds.dim() > 0 {
            bounds.validate()?;
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(GridError::NonPositiveEta(eta));
        }
        let max = bounds.min_width();
        if eta > max {
            return Err(GridError::EtaTooLarge { eta, max });
        }
        let mut k_min = Vec::with_capacity(bounds.dim());
        let mut counts = Vec::with_capacity(bounds.dim());
        let mut axes = Vec::with_capacity(bounds.dim());
        let mut total: u128 = 1;
        for &[lo, hi] in &bounds.0 {
            let mut kl = (lo / eta).ceil() as i64;
            while in_interval(kl - 1, eta, lo, hi) {
                kl -= 1;
            }
            while !in_interval(kl, eta, lo, hi) {
                kl += 1;
            }
            let mut kh = (hi / eta).floor() as i64;
            while in_interval(kh + 1, eta, lo, hi) {
                kh += 1;
            }
            while !in_interval(kh, eta, lo, hi) {
                kh -= 1;
            }
            let count = (kh - kl + 1) as usize;
            total = total.saturating_mul(count as u128);
            if total > u32::MAX as u128 {
                return Err(GridError::TooLarge(total));
            }
            axes.push((kl..=kh).map(|k| (k as f64 * eta).clamp(lo, hi)).collect());
            k_min.push(kl);
            counts.push(count);
        }
        Ok(Grid {
            bounds,
            eta,
            k_min,
            counts,
            axes,
            len: total as usize,
        })
    }

    pub fn from_params(p: &GridParams) -> Result<Grid, GridError> {
        Grid::new(p.bounds.clone(), p.eta)
    }

    pub fn params(&self) -> GridParams {
        GridParams {
            bounds: self.bounds.clone(),
            eta: self.eta,
        }
    }

    pub fn bounds(&self) -> &BoxSet {
        &self.bounds
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn points_per_dim(&self) -> &[usize] {
        &self.counts
    }

    /// Smallest integer multiplier per dimension.
    pub fn origin_index(&self) -> &[i64] {
        &self.k_min
    }

    /// Integer multipliers `k` with `point = k·η`.
    pub fn multipliers(&self, index: usize) -> Vec<i64> {
        self.offsets(index)
            .iter()
            .zip(&self.k_min)
            .map(|(o, k)| *o as i64 + k)
            .collect()
    }

    fn offsets(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = index % self.counts[d];
            index /= self.counts[d];
        }
        out
    }

    fn flat(&self, offsets: &[usize]) -> usize {
        offsets.iter().zip(&self.counts).fold(0, |acc, (o, c)| acc * c + o)
    }

    pub fn point_into(&self, mut index: usize, out: &mut [f64]) {
        for d in (0..self.dim()).rev() {
            out[d] = self.axes[d][index % self.counts[d]];
            index /= self.counts[d];
        }
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.point_into(index, &mut out);
        out
    }

    /// Points in lexicographic order of their index vectors (last dimension fastest).
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
        (0..self.len).map(move |i| (i, self.point(i)))
    }

    fn nearest_axis(&self, d: usize, v: f64) -> usize {
        let axis = &self.axes[d];
        let guess = ((v / self.eta).floor() as i64 - self.k_min[d]).clamp(0, axis.len() as i64 - 1) as usize;
        let mut best = guess;
        for j in guess.saturating_sub(1)..(guess + 2).min(axis.len()) {
            let dj = (axis[j] - v).abs();
            let db = (axis[best] - v).abs();
            // ties go to the smaller coordinate
            if dj < db || (dj == db && axis[j] < axis[best]) {
                best = j;
            }
        }
        best
    }

    /// Grid point closest to `x` in the infinity norm.
    pub fn nearest_point(&self, x: &[f64]) -> Result<(usize, Vec<f64>), GridError> {
        if x.len() != self.dim() {
            return Err(GridError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let half = self.eta / 2.0;
        let mut offsets = Vec::with_capacity(self.dim());
        for (d, &v) in x.iter().enumerate() {
            let (lo, hi) = (self.bounds.lo(d), self.bounds.hi(d));
            if !(v >= lo - half && v <= hi + half) {
                return Err(GridError::OutOfRange { dim: d, value: v, lo, hi });
            }
            offsets.push(self.nearest_axis(d, v));
        }
        let idx = self.flat(&offsets);
        Ok((idx, self.point(idx)))
    }

    /// Sorted indices of all points `p` with `‖p − center‖∞ ≤ radius`.
    pub fn ball_points(&self, center: &[f64], radius: f64) -> Vec<usize> {
        let mut ranges = Vec::with_capacity(self.dim());
        for (d, &c) in center.iter().enumerate().take(self.dim()) {
            let axis = &self.axes[d];
            let lo = ((c - radius) / self.eta).floor() as i64 - self.k_min[d] - 1;
            let hi = ((c + radius) / self.eta).ceil() as i64 - self.k_min[d] + 1;
            let lo = lo.max(0);
            let hi = hi.min(axis.len() as i64 - 1);
            let hits: Vec<usize> = (lo..=hi)
                .map(|j| j as usize)
                .filter(|&j| (axis[j] - c).abs() <= radius)
                .collect();
            if hits.is_empty() {
                return Vec::new();
            }
            ranges.push(hits);
        }
        if ranges.len() != self.dim() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut cursor = vec![0usize; self.dim()];
        loop {
            let offsets: Vec<usize> = cursor.iter().zip(&ranges).map(|(i, r)| r[*i]).collect();
            out.push(self.flat(&offsets));
            let mut d = self.dim();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < ranges[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
    }

    /// Index of the point with exactly these multipliers, if it is on the grid.
    pub fn index_of_multipliers(&self, k: &[i64]) -> Option<usize> {
        let mut offsets = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let o = k[d] - self.k_min[d];
            if o < 0 || o as usize >= self.counts[d] {
                return None;
            }
            offsets.push(o as usize);
        }
        Some(self.flat(&offsets))
    }

    /// Index of the grid point within `tol` of `x` in every coordinate.
    pub fn locate(&self, x: &[f64], tol: f64) -> Option<usize> {
        let mut offsets = Vec::with_capacity(self.dim());
        for (d, &v) in x.iter().enumerate() {
            let axis = &self.axes[d];
            let guess = (v / self.eta).round() as i64 - self.k_min[d];
            if guess < 0 || guess as usize >= axis.len() {
                return None;
            }
            let j = guess as usize;
            if (axis[j] - v).abs() > tol {
                return None;
            }
            offsets.push(j);
        }
        Some(self.flat(&offsets))
    }
}

/// Builds `[bounds]_eta`.
pub fn build_grid(bounds: BoxSet, eta: f64) -> Result<Grid, GridError> {
    Grid::new(bounds, eta)
}
