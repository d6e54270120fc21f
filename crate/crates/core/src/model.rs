//! Uncontrolled jump-process data: finite state space, piecewise-constant
//! rate measure `nu(t, x, {y})` and the generator it induces.
//!
//! Rates are constant on half-open time cells `[s_k, s_{k+1})`. Every lookup
//! goes through [`At`], which carries the side of a breakpoint the caller
//! means, so integrators can evaluate left limits at the end of a segment
//! without stepping into the next cell.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative rate nu[{cell}][{from}][{to}] = {value}")]
    NegativeRate {
        cell: usize,
        from: usize,
        to: usize,
        value: f64,
    },
    #[error("nonzero diagonal rate nu[{cell}][{state}][{state}] = {value}")]
    DiagonalRate { cell: usize, state: usize, value: f64 },
    #[error("bad time grid: {0}")]
    BadGrid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry: {0}")]
    NonFinite(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
}

/// Which one-sided limit to take when a time sits exactly on a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The cell `[s_k, s_{k+1})` containing `t` (right-continuous value).
    Right,
    /// The cell `(s_k, s_{k+1}]` containing `t` (left limit).
    Left,
}

/// A time together with the side used for piecewise-constant lookups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct At {
    pub t: f64,
    pub side: Side,
}

impl At {
    pub fn right(t: f64) -> Self {
        At { t, side: Side::Right }
    }

    pub fn left(t: f64) -> Self {
        At { t, side: Side::Left }
    }
}

/// Strictly increasing breakpoints `0 = s_0 < s_1 < ... < s_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellGrid {
    breaks: Vec<f64>,
}

impl CellGrid {
    pub fn new(breaks: Vec<f64>, horizon: f64) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::BadGrid(format!("horizon must be positive, got {horizon}")));
        }
        if breaks.len() < 2 {
            return Err(ModelError::BadGrid("need at least two breakpoints".into()));
        }
        if breaks[0] != 0.0 {
            return Err(ModelError::BadGrid(format!("first breakpoint must be 0, got {}", breaks[0])));
        }
        if let Some(w) = breaks.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(ModelError::BadGrid(format!(
                "breakpoints not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let last = *breaks.last().unwrap();
        if last != horizon {
            return Err(ModelError::BadGrid(format!("last breakpoint {last} differs from horizon {horizon}")));
        }
        Ok(CellGrid { breaks })
    }

    /// Single cell `[0, T)`.
    pub fn single(horizon: f64) -> Result<Self, ModelError> {
        CellGrid::new(vec![0.0, horizon], horizon)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn horizon(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn n_cells(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn bounds(&self, k: usize) -> (f64, f64) {
        (self.breaks[k], self.breaks[k + 1])
    }

    /// Cell index for `at`; times outside `[0, T]` are clamped to the end cells.
    pub fn locate(&self, at: At) -> usize {
        let m = self.n_cells();
        // number of interior breakpoints strictly below (Left) or at-or-below (Right) t
        let interior = &self.breaks[1..m];
        let k = match at.side {
            Side::Right => interior.partition_point(|&s| s <= at.t),
            Side::Left => interior.partition_point(|&s| s < at.t),
        };
        k.min(m - 1)
    }

    /// Common refinement: union of both breakpoint sets.
    pub fn refine(&self, other: &CellGrid) -> CellGrid {
        let mut all: Vec<f64> = self.breaks.iter().chain(other.breaks.iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        CellGrid { breaks: all }
    }
}

/// `states` field: either a bare count or a list of labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StatesSpec {
    Count(usize),
    Labels(Vec<String>),
}

impl StatesSpec {
    pub fn count(&self) -> usize {
        match self {
            StatesSpec::Count(n) => *n,
            StatesSpec::Labels(l) => l.len(),
        }
    }
}

/// Model section as it appears in a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub states: StatesSpec,
    pub horizon: f64,
    /// Breakpoints; defaults to the single cell `[0, horizon]`.
    #[serde(default)]
    pub time_cells: Option<Vec<f64>>,
    /// One `n x n` matrix per cell.
    pub nu: Vec<Vec<Vec<f64>>>,
}

/// Total rate and post-jump distribution at `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDecomposition {
    pub lambda: f64,
    pub pi: Vec<f64>,
}

/// Validated, immutable rate-measure data.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    n: usize,
    labels: Option<Vec<String>>,
    cells: CellGrid,
    /// Row-major `n x n` per cell.
    nu: Vec<Vec<f64>>,
    /// Row sums `lambda_k(x)` per cell.
    lambda: Vec<Vec<f64>>,
    lambda_max: f64,
}

pub fn validate_model(raw: &RawModel) -> Result<Model, ModelError> {
    let n = raw.states.count();
    if n == 0 {
        return Err(ModelError::Dimension("state space must be nonempty".into()));
    }
    let breaks = raw.time_cells.clone().unwrap_or_else(|| vec![0.0, raw.horizon]);
    let cells = CellGrid::new(breaks, raw.horizon)?;
    if raw.nu.len() != cells.n_cells() {
        return Err(ModelError::Dimension(format!(
            "{} rate matrices for {} time cells",
            raw.nu.len(),
            cells.n_cells()
        )));
    }
    let mut flat = Vec::with_capacity(raw.nu.len());
    for (k, mat) in raw.nu.iter().enumerate() {
        if mat.len() != n || mat.iter().any(|row| row.len() != n) {
            return Err(ModelError::Dimension(format!("rate matrix of cell {k} is not {n}x{n}")));
        }
        flat.push(mat.iter().flatten().copied().collect::<Vec<_>>());
    }
    let labels = match &raw.states {
        StatesSpec::Labels(l) => Some(l.clone()),
        StatesSpec::Count(_) => None,
    };
    Model::from_parts(n, labels, cells, flat)
}

impl Model {
    /// Builds a model from flattened per-cell matrices, enforcing all invariants.
    pub fn from_parts(
        n: usize,
        labels: Option<Vec<String>>,
        cells: CellGrid,
        nu: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::Dimension("state space must be nonempty".into()));
        }
        if nu.len() != cells.n_cells() {
            return Err(ModelError::Dimension(format!(
                "{} rate matrices for {} time cells",
                nu.len(),
                cells.n_cells()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(ModelError::Dimension(format!("{} labels for {n} states", l.len())));
            }
        }
        let mut lambda = Vec::with_capacity(nu.len());
        let mut lambda_max = 0.0_f64;
        for (k, mat) in nu.iter().enumerate() {
            if mat.len() != n * n {
                return Err(ModelError::Dimension(format!("rate matrix of cell {k} is not {n}x{n}")));
            }
            let mut sums = vec![0.0; n];
            for x in 0..n {
                for y in 0..n {
                    let value = mat[x * n + y];
                    if !value.is_finite() {
                        return Err(ModelError::NonFinite(format!("nu[{k}][{x}][{y}] = {value}")));
                    }
                    if value < 0.0 {
                        return Err(ModelError::NegativeRate { cell: k, from: x, to: y, value });
                    }
                    if x == y && value != 0.0 {
                        return Err(ModelError::DiagonalRate { cell: k, state: x, value });
                    }
                    sums[x] += value;
                }
                lambda_max = lambda_max.max(sums[x]);
            }
            lambda.push(sums);
        }
        Ok(Model { n, labels, cells, nu, lambda, lambda_max })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn horizon(&self) -> f64 {
        self.cells.horizon()
    }

    pub fn cells(&self) -> &CellGrid {
        &self.cells
    }

    /// Uniform bound on the total jump rate.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Row `nu_k[x][.]` of cell `k`.
    pub fn row(&self, k: usize, x: usize) -> &[f64] {
        &self.nu[k][x * self.n..(x + 1) * self.n]
    }

    pub fn cell_matrix(&self, k: usize) -> &[f64] {
        &self.nu[k]
    }

    pub fn rate(&self, k: usize, x: usize, y: usize) -> f64 {
        self.nu[k][x * self.n + y]
    }

    pub fn lambda_in_cell(&self, k: usize, x: usize) -> f64 {
        self.lambda[k][x]
    }

    pub fn cell_at(&self, at: At) -> usize {
        self.cells.locate(at)
    }

    fn check_time(&self, t: f64) -> Result<(), ModelError> {
        if !(t >= 0.0 && t < self.horizon()) {
            return Err(ModelError::OutOfRange(format!("time {t} outside [0, {})", self.horizon())));
        }
        Ok(())
    }

    fn check_state(&self, x: usize) -> Result<(), ModelError> {
        if x >= self.n {
            return Err(ModelError::OutOfRange(format!("state {x} outside 0..{}", self.n)));
        }
        Ok(())
    }

    pub fn jump_decomposition(&self, t: f64, x: usize) -> Result<JumpDecomposition, ModelError> {
        self.check_time(t)?;
        self.check_state(x)?;
        let k = self.cell_at(At::right(t));
        let lambda = self.lambda[k][x];
        let pi = if lambda > 0.0 {
            self.row(k, x).iter().map(|r| r / lambda).collect()
        } else {
            let mut p = vec![0.0; self.n];
            p[x] = 1.0;
            p
        };
        Ok(JumpDecomposition { lambda, pi })
    }

    /// `(L_t v)(x) = sum_y (v(y) - v(x)) nu(t, x, {y})`.
    pub fn generator_apply(&self, t: f64, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_time(t)?;
        if v.len() != self.n {
            return Err(ModelError::Dimension(format!("vector of length {} for {} states", v.len(), self.n)));
        }
        let mut out = vec![0.0; self.n];
        self.generator_in_cell(self.cell_at(At::right(t)), v, &mut out);
        Ok(out)
    }

    pub(crate) fn generator_in_cell(&self, k: usize, v: &[f64], out: &mut [f64]) {
        for x in 0..self.n {
            out[x] = self.generator_at_state(k, x, v);
        }
    }

    pub(crate) fn generator_at_state(&self, k: usize, x: usize, v: &[f64]) -> f64 {
        self.row(k, x).iter().zip(v).map(|(rate, vy)| rate * (vy - v[x])).sum()
    }

    /// Back to the file representation.
    pub fn to_raw(&self) -> RawModel {
        RawModel {
            states: match &self.labels {
                Some(l) => StatesSpec::Labels(l.clone()),
                None => StatesSpec::Count(self.n),
            },
            horizon: self.horizon(),
            time_cells: Some(self.cells.breaks().to_vec()),
            nu: self
                .nu
                .iter()
                .map(|m| m.chunks(self.n).map(|r| r.to_vec()).collect())
                .collect(),
        }
    }
}
