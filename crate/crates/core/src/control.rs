//! Optimal control of the jump process through a density `r(t, x, y, u)`
//! that reweights the reference rate measure: the controlled process jumps
//! from `x` to `y` at rate `r(t, x, y, u) nu(t, x, {y})`.
//!
//! The HJB equation is the nonlinear Kolmogorov equation whose driver is the
//! hamiltonian
//!
//! ```text
//! f(s, x, z) = min_u { l(s, x, u) + sum_y z(y) (r(s, x, y, u) - 1) nu(s, x, {y}) }
//! ```
//!
//! Costs of a control are estimated either by simulating the controlled
//! process or by reweighting reference paths with the Girsanov density.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mc::{self, Estimate};
use crate::model::{At, CellGrid, Model, ModelError, StatesSpec};
use crate::pde::{self, Driver, PdeError, ValueFunction};
use crate::simulate::{self, MarkedPath, SimulateError};
use crate::table::read_rows;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("negative control density r[{cell}][{action}][{from}][{to}] = {value}")]
    NegativeDensity {
        cell: usize,
        action: usize,
        from: usize,
        to: usize,
        value: f64,
    },
    #[error("non-finite entry: {0}")]
    NonFinite(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("bad policy: {0}")]
    BadPolicy(String),
    #[error("controlled data not absolutely continuous w.r.t. the reference: {0}")]
    NotAbsolutelyContinuous(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Control section as it appears in a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawControl {
    /// Action count or labels.
    pub actions: StatesSpec,
    /// Defaults to the model's cells.
    #[serde(default)]
    pub time_cells: Option<Vec<f64>>,
    /// Per cell, one `n x n` matrix per action: `r[k][u][x][y]`.
    pub r: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per cell, `n x m` running cost: `l[k][x][u]`.
    pub l: Vec<Vec<Vec<f64>>>,
    pub g: Vec<f64>,
}

/// Validated control data. `C_r` is the largest entry of `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlModel {
    n: usize,
    m: usize,
    labels: Option<Vec<String>>,
    cells: CellGrid,
    /// `[k][(x * n + y) * m + u]`
    r: Vec<Vec<f64>>,
    /// `[k][x * m + u]`
    l: Vec<Vec<f64>>,
    g: Vec<f64>,
    c_r: f64,
}

pub fn validate_control(raw: &RawControl, model: &Model) -> Result<ControlModel, ControlError> {
    let n = model.n_states();
    let m = raw.actions.count();
    if m == 0 {
        return Err(ControlError::Dimension("action set must be nonempty".into()));
    }
    let cells = match &raw.time_cells {
        Some(b) => CellGrid::new(b.clone(), model.horizon())?,
        None => model.cells().clone(),
    };
    let n_cells = cells.n_cells();
    if raw.r.len() != n_cells || raw.l.len() != n_cells {
        return Err(ControlError::Dimension(format!(
            "control tables have {} (r) and {} (l) cells, expected {n_cells}",
            raw.r.len(),
            raw.l.len()
        )));
    }
    if raw.g.len() != n {
        return Err(ControlError::Dimension(format!("terminal cost has length {}, expected {n}", raw.g.len())));
    }
    let mut r = Vec::with_capacity(n_cells);
    let mut l = Vec::with_capacity(n_cells);
    for k in 0..n_cells {
        let rk = &raw.r[k];
        if rk.len() != m || rk.iter().any(|mat| mat.len() != n || mat.iter().any(|row| row.len() != n)) {
            return Err(ControlError::Dimension(format!("r of cell {k} must be {m} matrices of {n}x{n}")));
        }
        let mut flat = vec![0.0; n * n * m];
        for (u, mat) in rk.iter().enumerate() {
            for (x, row) in mat.iter().enumerate() {
                for (y, &value) in row.iter().enumerate() {
                    flat[(x * n + y) * m + u] = value;
                }
            }
        }
        r.push(flat);
        let lk = &raw.l[k];
        if lk.len() != n || lk.iter().any(|row| row.len() != m) {
            return Err(ControlError::Dimension(format!("l of cell {k} must be {n}x{m}")));
        }
        l.push(lk.iter().flatten().copied().collect());
    }
    let labels = match &raw.actions {
        StatesSpec::Labels(v) => Some(v.clone()),
        StatesSpec::Count(_) => None,
    };
    ControlModel::from_parts(n, m, labels, cells, r, l, raw.g.clone())
}

impl ControlModel {
    pub fn from_parts(
        n: usize,
        m: usize,
        labels: Option<Vec<String>>,
        cells: CellGrid,
        r: Vec<Vec<f64>>,
        l: Vec<Vec<f64>>,
        g: Vec<f64>,
    ) -> Result<Self, ControlError> {
        let k_cells = cells.n_cells();
        if r.len() != k_cells || l.len() != k_cells || g.len() != n {
            return Err(ControlError::Dimension("control tables do not match cells/states".into()));
        }
        let mut c_r = 0.0_f64;
        for (k, rk) in r.iter().enumerate() {
            if rk.len() != n * n * m {
                return Err(ControlError::Dimension(format!("r of cell {k} has wrong size")));
            }
            for (idx, &value) in rk.iter().enumerate() {
                let (u, xy) = (idx % m, idx / m);
                if !value.is_finite() {
                    return Err(ControlError::NonFinite(format!("r[{k}][{u}][{}][{}] = {value}", xy / n, xy % n)));
                }
                if value < 0.0 {
                    return Err(ControlError::NegativeDensity { cell: k, action: u, from: xy / n, to: xy % n, value });
                }
                c_r = c_r.max(value);
            }
        }
        for (k, lk) in l.iter().enumerate() {
            if lk.len() != n * m {
                return Err(ControlError::Dimension(format!("l of cell {k} has wrong size")));
            }
            if let Some(idx) = lk.iter().position(|v| !v.is_finite()) {
                return Err(ControlError::NonFinite(format!("l[{k}][{}][{}]", idx / m, idx % m)));
            }
        }
        if let Some(x) = g.iter().position(|v| !v.is_finite()) {
            return Err(ControlError::NonFinite(format!("g[{x}]")));
        }
        if let Some(lab) = &labels {
            if lab.len() != m {
                return Err(ControlError::Dimension(format!("{} labels for {m} actions", lab.len())));
            }
        }
        Ok(ControlModel { n, m, labels, cells, r, l, g, c_r })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.m
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn cells(&self) -> &CellGrid {
        &self.cells
    }

    pub fn terminal_cost(&self) -> &[f64] {
        &self.g
    }

    pub fn c_r(&self) -> f64 {
        self.c_r
    }

    pub fn r(&self, k: usize, x: usize, y: usize, u: usize) -> f64 {
        self.r[k][(x * self.n + y) * self.m + u]
    }

    pub fn running_cost(&self, k: usize, x: usize, u: usize) -> f64 {
        self.l[k][x * self.m + u]
    }

    pub fn cell_at(&self, at: At) -> usize {
        self.cells.locate(at)
    }

    fn check_against(&self, model: &Model) -> Result<(), ControlError> {
        if self.n != model.n_states() {
            return Err(ControlError::Dimension(format!(
                "control has {} states, model {}",
                self.n,
                model.n_states()
            )));
        }
        if self.cells.horizon() != model.horizon() {
            return Err(ControlError::Dimension("control and model horizons differ".into()));
        }
        Ok(())
    }

    pub fn to_raw(&self) -> RawControl {
        let (n, m) = (self.n, self.m);
        RawControl {
            actions: match &self.labels {
                Some(l) => StatesSpec::Labels(l.clone()),
                None => StatesSpec::Count(m),
            },
            time_cells: Some(self.cells.breaks().to_vec()),
            r: (0..self.cells.n_cells())
                .map(|k| {
                    (0..m)
                        .map(|u| (0..n).map(|x| (0..n).map(|y| self.r(k, x, y, u)).collect()).collect())
                        .collect()
                })
                .collect(),
            l: (0..self.cells.n_cells())
                .map(|k| (0..n).map(|x| (0..m).map(|u| self.running_cost(k, x, u)).collect()).collect())
                .collect(),
            g: self.g.clone(),
        }
    }
}

/// `l(s, x, u) + sum_y z(y) (r(s, x, y, u) - 1) nu(s, x, {y})`.
pub fn action_cost(model: &Model, cm: &ControlModel, at: At, x: usize, z: &[f64], u: usize) -> f64 {
    let km = model.cell_at(at);
    let kc = cm.cell_at(at);
    let jump: f64 = model
        .row(km, x)
        .iter()
        .enumerate()
        .filter(|(_, &nu)| nu > 0.0)
        .map(|(y, &nu)| z[y] * (cm.r(kc, x, y, u) - 1.0) * nu)
        .sum();
    cm.running_cost(kc, x, u) + jump
}

pub(crate) fn hamiltonian_value(model: &Model, cm: &ControlModel, at: At, x: usize, z: &[f64]) -> f64 {
    (0..cm.n_actions())
        .map(|u| action_cost(model, cm, at, x, z, u))
        .fold(f64::INFINITY, f64::min)
}

/// Tolerance for membership in the set of minimizers.
pub const ARGMIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianResult {
    pub value: f64,
    /// All actions within [`ARGMIN_TOL`] of the minimum, ascending.
    pub argmin_set: Vec<usize>,
    /// Least-index minimizer.
    pub chosen: usize,
}

/// Exhaustive minimization over the finite action set.
pub fn hamiltonian(
    model: &Model,
    cm: &ControlModel,
    at: At,
    x: usize,
    z: &[f64],
) -> Result<HamiltonianResult, ControlError> {
    cm.check_against(model)?;
    if !(at.t >= 0.0 && at.t <= model.horizon()) || x >= model.n_states() {
        return Err(ControlError::OutOfRange(format!("(t={}, x={x}) outside the domain", at.t)));
    }
    if z.len() != model.n_states() {
        return Err(ControlError::Dimension(format!("z has length {}, expected {}", z.len(), model.n_states())));
    }
    let costs: Vec<f64> = (0..cm.n_actions()).map(|u| action_cost(model, cm, at, x, z, u)).collect();
    let value = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin_set: Vec<usize> = (0..costs.len()).filter(|&u| costs[u] - value <= ARGMIN_TOL).collect();
    let chosen = argmin_set[0];
    Ok(HamiltonianResult { value, argmin_set, chosen })
}

/// `L = (C_r + 1) sqrt(Lambda)`, `L' = 0`.
pub fn lipschitz_bounds(model: &Model, cm: &ControlModel) -> (f64, f64) {
    ((cm.c_r() + 1.0) * model.lambda_max().sqrt(), 0.0)
}

/// Feedback law `u[k][x]` on the control cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeedbackPolicy {
    n_actions: usize,
    table: Vec<Vec<usize>>,
}

impl FeedbackPolicy {
    pub fn new(cm: &ControlModel, table: Vec<Vec<usize>>) -> Result<Self, ControlError> {
        if table.len() != cm.cells().n_cells() || table.iter().any(|row| row.len() != cm.n_states()) {
            return Err(ControlError::BadPolicy(format!(
                "table must be {} cells x {} states",
                cm.cells().n_cells(),
                cm.n_states()
            )));
        }
        if let Some(&u) = table.iter().flatten().find(|&&u| u >= cm.n_actions()) {
            return Err(ControlError::BadPolicy(format!("action {u} outside 0..{}", cm.n_actions())));
        }
        Ok(FeedbackPolicy { n_actions: cm.n_actions(), table })
    }

    /// Same action everywhere.
    pub fn constant(cm: &ControlModel, u: usize) -> Result<Self, ControlError> {
        FeedbackPolicy::new(cm, vec![vec![u; cm.n_states()]; cm.cells().n_cells()])
    }

    pub fn action(&self, cell: usize, x: usize) -> usize {
        self.table[cell][x]
    }

    pub fn table(&self) -> &[Vec<usize>] {
        &self.table
    }

    /// `cell_index,state,action` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "cell_index,state,action")?;
        for (k, row) in self.table.iter().enumerate() {
            for (x, u) in row.iter().enumerate() {
                writeln!(out, "{k},{x},{u}")?;
            }
        }
        Ok(())
    }

    /// Parses the CSV written by [`FeedbackPolicy::write_csv`]; every
    /// `(cell, state)` pair must appear exactly once.
    pub fn read_csv(text: &str, cm: &ControlModel) -> Result<Self, ControlError> {
        let rows = read_rows(text, &["cell_index", "state", "action"]).map_err(ControlError::BadPolicy)?;
        let (cells, n) = (cm.cells().n_cells(), cm.n_states());
        let mut table = vec![vec![usize::MAX; n]; cells];
        for row in rows {
            let parse = |s: &str| s.parse::<usize>().map_err(|e| ControlError::BadPolicy(format!("{s:?}: {e}")));
            let (k, x, u) = (parse(row[0])?, parse(row[1])?, parse(row[2])?);
            if k >= cells || x >= n {
                return Err(ControlError::BadPolicy(format!("entry ({k}, {x}) outside {cells} cells x {n} states")));
            }
            if table[k][x] != usize::MAX {
                return Err(ControlError::BadPolicy(format!("duplicate entry ({k}, {x})")));
            }
            table[k][x] = u;
        }
        if table.iter().flatten().any(|&u| u == usize::MAX) {
            return Err(ControlError::BadPolicy("missing (cell, state) entries".into()));
        }
        FeedbackPolicy::new(cm, table)
    }
}

/// Jumps strictly before the current time.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub times: &'a [f64],
    pub marks: &'a [usize],
}

/// Predictable control: constant on each control cell between jumps,
/// chosen from the pre-jump state and the jump history.
pub trait AdmissibleControl: Sync {
    fn action(&self, cell: usize, state: usize, history: History<'_>) -> usize;
}

impl AdmissibleControl for FeedbackPolicy {
    fn action(&self, cell: usize, state: usize, _history: History<'_>) -> usize {
        self.table[cell][state]
    }
}

/// Closure-backed history-dependent control.
pub struct HistoryControl<F>(pub F);

impl<F> AdmissibleControl for HistoryControl<F>
where
    F: Fn(usize, usize, History<'_>) -> usize + Sync,
{
    fn action(&self, cell: usize, state: usize, history: History<'_>) -> usize {
        (self.0)(cell, state, history)
    }
}

/// HJB solve with the hamiltonian driver, then feedback extraction at the
/// left endpoint of each control cell.
pub fn solve_hjb(model: &Model, cm: &ControlModel, h: f64) -> Result<(ValueFunction, FeedbackPolicy), ControlError> {
    cm.check_against(model)?;
    let driver = Driver::Hamiltonian(Arc::new(cm.clone()));
    let v = pde::solve_kolmogorov(model, &driver, cm.terminal_cost(), h)?;
    let policy = extract_policy(model, cm, &v)?;
    Ok((v, policy))
}

/// Least-index minimizer at `(s_k, x)` using `v(s_k, .)`.
pub fn extract_policy(model: &Model, cm: &ControlModel, v: &ValueFunction) -> Result<FeedbackPolicy, ControlError> {
    let n = model.n_states();
    let mut row = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut table = Vec::with_capacity(cm.cells().n_cells());
    for k in 0..cm.cells().n_cells() {
        let s = cm.cells().bounds(k).0;
        v.row_at(s, &mut row);
        let mut actions = Vec::with_capacity(n);
        for x in 0..n {
            for y in 0..n {
                z[y] = row[y] - row[x];
            }
            actions.push(hamiltonian(model, cm, At::right(s), x, &z)?.chosen);
        }
        table.push(actions);
    }
    FeedbackPolicy::new(cm, table)
}

/// Model with rates `r(s, x, y, u(s, x)) nu(s, x, {y})` on the common
/// refinement of model and control cells.
pub fn controlled_model(model: &Model, cm: &ControlModel, policy: &FeedbackPolicy) -> Result<Model, ControlError> {
    cm.check_against(model)?;
    if policy.table.len() != cm.cells().n_cells() || policy.n_actions != cm.n_actions() {
        return Err(ControlError::BadPolicy("policy does not match the control cells".into()));
    }
    let n = model.n_states();
    let cells = model.cells().refine(cm.cells());
    let mats = (0..cells.n_cells())
        .map(|j| {
            let (a, b) = cells.bounds(j);
            let at = At::right(0.5 * (a + b));
            let (km, kc) = (model.cell_at(at), cm.cell_at(at));
            let mut mat = vec![0.0; n * n];
            for x in 0..n {
                let u = policy.action(kc, x);
                for y in 0..n {
                    if y != x {
                        mat[x * n + y] = cm.r(kc, x, y, u) * model.rate(km, x, y);
                    }
                }
            }
            mat
        })
        .collect();
    Ok(Model::from_parts(n, model.labels().map(|l| l.to_vec()), cells, mats)?)
}

/// Girsanov density `L_s` sampled at cell breakpoints and jump times.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPath {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightPath {
    pub fn terminal(&self) -> f64 {
        *self.weights.last().unwrap()
    }
}

/// Running cost and Girsanov density accumulated along one reference path.
struct PathFunctionals {
    weights: WeightPath,
    running_cost: f64,
}

fn walk_reference_path<C: AdmissibleControl + ?Sized>(
    model: &Model,
    cm: &ControlModel,
    control: &C,
    path: &MarkedPath,
) -> PathFunctionals {
    let n = model.n_states();
    let breaks = model.cells().refine(cm.cells());
    let pieces = path.pieces(breaks.breaks(), path.start_time, path.horizon);
    let mut times = vec![path.start_time];
    let mut weights = vec![1.0];
    let mut exponent = 0.0;
    let mut product = 1.0;
    let mut running_cost = 0.0;
    let mut next_jump = 0;
    for piece in pieces {
        let (a, b, x) = (piece.a, piece.b, piece.state);
        let at = At::right(0.5 * (a + b));
        let (km, kc) = (model.cell_at(at), cm.cell_at(at));
        let prior = path.jump_times.partition_point(|&tn| tn <= a);
        let history = History { times: &path.jump_times[..prior], marks: &path.marks[..prior] };
        let u = control.action(kc, x, history);
        let escape: f64 = (0..n).map(|y| (1.0 - cm.r(kc, x, y, u)) * model.rate(km, x, y)).sum();
        exponent += (b - a) * escape;
        running_cost += (b - a) * cm.running_cost(kc, x, u);
        while next_jump < path.jump_times.len() && path.jump_times[next_jump] == b {
            let to = path.marks[next_jump];
            product *= cm.r(kc, x, to, u);
            next_jump += 1;
        }
        times.push(b);
        weights.push(if product == 0.0 { 0.0 } else { exponent.exp() * product });
    }
    PathFunctionals { weights: WeightPath { times, weights }, running_cost }
}

/// `L_s = exp(int (1 - r) nu dz) * prod_{T_n <= s} r(T_n, X_{T_n-}, X_{T_n}, u_{T_n})`
/// along a path drawn under the reference model.
pub fn girsanov_weight<C: AdmissibleControl + ?Sized>(
    model: &Model,
    cm: &ControlModel,
    control: &C,
    path: &MarkedPath,
) -> Result<WeightPath, ControlError> {
    cm.check_against(model)?;
    Ok(walk_reference_path(model, cm, control, path).weights)
}

fn check_mc(model: &Model, cm: &ControlModel, t: f64, x: usize, n_paths: usize) -> Result<(), ControlError> {
    cm.check_against(model)?;
    if n_paths < 2 {
        return Err(ControlError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    if !(t >= 0.0 && t <= model.horizon()) || x >= model.n_states() {
        return Err(ControlError::OutOfRange(format!("start ({t}, {x}) outside the domain")));
    }
    Ok(())
}

/// Mean and SE of `L_T` under the reference law.
pub fn girsanov_mean<C: AdmissibleControl + ?Sized>(
    model: &Model,
    cm: &ControlModel,
    control: &C,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, ControlError> {
    check_mc(model, cm, t, x, n_paths)?;
    let samples = mc::collect_paths(n_paths, seed, |stream| {
        let path = simulate::simulate_unchecked(model, t, x, &mut stream.rng());
        walk_reference_path(model, cm, control, &path).weights.terminal()
    });
    Ok(mc::summarize(&samples))
}

/// Cost `E_u[int l ds + g(X_T)]` by simulating the controlled model.
pub fn cost_direct(
    model: &Model,
    cm: &ControlModel,
    policy: &FeedbackPolicy,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, ControlError> {
    check_mc(model, cm, t, x, n_paths)?;
    let controlled = controlled_model(model, cm, policy)?;
    let samples = mc::collect_paths(n_paths, seed, |stream| {
        let path = simulate::simulate_unchecked(&controlled, t, x, &mut stream.rng());
        controlled_path_cost(cm, policy, &path)
    });
    Ok(mc::summarize(&samples))
}

fn controlled_path_cost(cm: &ControlModel, policy: &FeedbackPolicy, path: &MarkedPath) -> f64 {
    let pieces = path.pieces(cm.cells().breaks(), path.start_time, path.horizon);
    let running: f64 = pieces
        .iter()
        .map(|p| {
            let kc = cm.cell_at(At::right(0.5 * (p.a + p.b)));
            (p.b - p.a) * cm.running_cost(kc, p.state, policy.action(kc, p.state))
        })
        .sum();
    running + cm.terminal_cost()[path.final_state()]
}

/// Cost `E[L_T (int l ds + g(X_T))]` from reference paths.
pub fn cost_reweighted<C: AdmissibleControl + ?Sized>(
    model: &Model,
    cm: &ControlModel,
    control: &C,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, ControlError> {
    check_mc(model, cm, t, x, n_paths)?;
    let samples = mc::collect_paths(n_paths, seed, |stream| {
        let path = simulate::simulate_unchecked(model, t, x, &mut stream.rng());
        let f = walk_reference_path(model, cm, control, &path);
        let weight = f.weights.terminal();
        if weight == 0.0 {
            0.0
        } else {
            weight * (f.running_cost + cm.terminal_cost()[path.final_state()])
        }
    });
    Ok(mc::summarize(&samples))
}

/// Monte Carlo pieces of the relation `v(t, x) = J + gap`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalGap {
    /// `E_u int {f - l - sum_y z (r - 1) nu} ds`, nonpositive.
    pub gap: Estimate,
    /// Cost of the policy on the same paths.
    pub cost: Estimate,
    /// Per-path `cost + gap`, an estimate of `v(t, x)`.
    pub total: Estimate,
    /// Largest integrand value seen at any quadrature node.
    pub max_integrand: f64,
}

/// Estimates the fundamental-relation correction for a feedback policy by
/// simulating the controlled model.
#[allow(clippy::too_many_arguments)]
pub fn fundamental_gap(
    model: &Model,
    cm: &ControlModel,
    policy: &FeedbackPolicy,
    v: &ValueFunction,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<FundamentalGap, ControlError> {
    check_mc(model, cm, t, x, n_paths)?;
    if v.n_states() != model.n_states() || v.grid().horizon() != model.horizon() {
        return Err(ControlError::Dimension("value function does not match the model".into()));
    }
    let controlled = controlled_model(model, cm, policy)?;
    let h = v.grid().step();
    let cell_breaks = model.cells().refine(cm.cells());
    let per_path = mc::collect_paths(n_paths, seed, |stream| {
        let path = simulate::simulate_unchecked(&controlled, t, x, &mut stream.rng());
        let breaks = simulate::quadrature_breaks(
            model,
            simulate::Quadrature::Subgrid(h),
            path.start_time,
            path.horizon,
            cell_breaks.breaks(),
        );
        let n = model.n_states();
        let mut row = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut max_integrand = f64::NEG_INFINITY;
        let mut gap = 0.0;
        for p in path.pieces(&breaks, path.start_time, path.horizon) {
            let kc = cm.cell_at(At::right(0.5 * (p.a + p.b)));
            let u = policy.action(kc, p.state);
            let mut integrand = |at: At| {
                v.row_at(at.t, &mut row);
                for y in 0..n {
                    z[y] = row[y] - row[p.state];
                }
                let value = hamiltonian_value(model, cm, at, p.state, &z) - action_cost(model, cm, at, p.state, &z, u);
                max_integrand = max_integrand.max(value);
                value
            };
            let fa = integrand(At::right(p.a));
            let fm = integrand(At::right(0.5 * (p.a + p.b)));
            let fb = integrand(At::left(p.b));
            gap += (p.b - p.a) / 6.0 * (fa + 4.0 * fm + fb);
        }
        let cost = controlled_path_cost(cm, policy, &path);
        (gap, cost, max_integrand)
    });
    let gaps: Vec<f64> = per_path.iter().map(|s| s.0).collect();
    let costs: Vec<f64> = per_path.iter().map(|s| s.1).collect();
    let totals: Vec<f64> = per_path.iter().map(|s| s.0 + s.1).collect();
    let max_integrand = per_path.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    Ok(FundamentalGap {
        gap: mc::summarize(&gaps),
        cost: mc::summarize(&costs),
        total: mc::summarize(&totals),
        max_integrand,
    })
}

/// Controlled jump data `lambda^u`, `pi^u` over the reference model's cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawReduction {
    /// `lambda_u[k][x][u]`
    pub lambda_u: Vec<Vec<Vec<f64>>>,
    /// `pi_u[k][u][x][y]`
    pub pi_u: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// `r[k][u][x][y]`, the layout of the control section.
    pub r: Vec<Vec<Vec<Vec<f64>>>>,
    pub c_r: f64,
}

/// `0/0 = 1` ratio used by the reduction.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 && num == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Density `r = (d pi^u / d pi) (lambda^u / lambda)` that reproduces the
/// controlled rates `lambda^u pi^u` as `r nu`.
///
/// Diagonal entries carry `lambda^u / lambda`; they never multiply a
/// nonzero rate. The kernel `pi^u(x, .)` is only inspected where
/// `lambda^u(x) > 0`.
pub fn reduce_model(raw: &RawReduction, reference: &Model) -> Result<Reduction, ControlError> {
    let n = reference.n_states();
    let cells = reference.cells().n_cells();
    if raw.lambda_u.len() != cells || raw.pi_u.len() != cells {
        return Err(ControlError::Dimension(format!("reduction data must cover {cells} cells")));
    }
    let m = raw.lambda_u.first().and_then(|c| c.first()).map_or(0, |r| r.len());
    if m == 0 {
        return Err(ControlError::Dimension("reduction data has no actions".into()));
    }
    let mut r = vec![vec![vec![vec![0.0; n]; n]; m]; cells];
    let mut c_r = 0.0_f64;
    for k in 0..cells {
        let lam = &raw.lambda_u[k];
        let pi = &raw.pi_u[k];
        if lam.len() != n || lam.iter().any(|row| row.len() != m) {
            return Err(ControlError::Dimension(format!("lambda_u of cell {k} must be {n}x{m}")));
        }
        if pi.len() != m || pi.iter().any(|mat| mat.len() != n || mat.iter().any(|row| row.len() != n)) {
            return Err(ControlError::Dimension(format!("pi_u of cell {k} must be {m} matrices of {n}x{n}")));
        }
        for u in 0..m {
            for x in 0..n {
                let lam_u = lam[x][u];
                if !(lam_u.is_finite() && lam_u >= 0.0) {
                    return Err(ControlError::NonFinite(format!("lambda_u[{k}][{x}][{u}] = {lam_u}")));
                }
                let lam_ref = reference.lambda_in_cell(k, x);
                if lam_ref == 0.0 && lam_u > 0.0 {
                    return Err(ControlError::NotAbsolutelyContinuous(format!(
                        "cell {k}, state {x}, action {u}: reference rate is 0 but controlled rate is {lam_u}"
                    )));
                }
                let rate_ratio = ratio(lam_u, lam_ref);
                r[k][u][x][x] = rate_ratio;
                if lam_u == 0.0 {
                    continue;
                }
                let row = &pi[u][x];
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(ControlError::Invalid(format!(
                        "pi_u[{k}][{u}][{x}] is not a probability vector"
                    )));
                }
                if row[x] > 0.0 {
                    return Err(ControlError::Invalid(format!(
                        "pi_u[{k}][{u}][{x}] charges the current state while lambda_u > 0"
                    )));
                }
                for y in (0..n).filter(|&y| y != x) {
                    let pi_ref = reference.rate(k, x, y) / lam_ref;
                    if pi_ref == 0.0 && row[y] > 0.0 {
                        return Err(ControlError::NotAbsolutelyContinuous(format!(
                            "cell {k}, state {x} -> {y}, action {u}: reference kernel is 0 but controlled kernel is {}",
                            row[y]
                        )));
                    }
                    r[k][u][x][y] = ratio(row[y], pi_ref) * rate_ratio;
                }
            }
            for row in &r[k][u] {
                for &v in row {
                    c_r = c_r.max(v);
                }
            }
        }
    }
    Ok(Reduction { r, c_r })
}
