//! Backward solvers for the nonlinear Kolmogorov equation
//!
//! ```text
//! d/dt v(t,x) + L_t v(t,x) + f(t, x, v(t,x), v(t,.) - v(t,x)) = 0,   v(T,.) = g
//! ```
//!
//! by fixed-step classical Runge-Kutta, and by the integral-form fixed-point
//! map `u -> g + int_t^T (L_s u + f(u)) ds` with trapezoidal quadrature.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{self, ControlModel};
use crate::model::{At, Model, ModelError};
use crate::table::fmt_float;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("non-finite value at t={t}, state {state} (step too large or driver blows up)")]
    NonFiniteValue { t: f64, state: usize },
    #[error("bad time step: {0}")]
    BadStep(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid driver: {0}")]
    BadDriver(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniform grid `t_i = i * h`, `i = 0..=N`, with `t_N = T` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    h: f64,
}

impl TimeGrid {
    /// Requires `h` to divide `T` and every entry of `aligned` to be a node.
    pub fn new(horizon: f64, h: f64, aligned: &[f64]) -> Result<Self, PdeError> {
        if !(h.is_finite() && h > 0.0 && h <= horizon) {
            return Err(PdeError::BadStep(format!("step {h} must lie in (0, {horizon}]")));
        }
        let ratio = horizon / h;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(PdeError::BadStep(format!("step {h} does not divide horizon {horizon}")));
        }
        let steps = steps as usize;
        let h = horizon / steps as f64;
        for &s in aligned {
            let r = s / h;
            if (r - r.round()).abs() > 1e-7 {
                return Err(PdeError::BadStep(format!("breakpoint {s} is not a multiple of step {h}")));
            }
        }
        Ok(TimeGrid { horizon, steps, h })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn node(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|i| self.node(i))
    }

    /// Index `i` of the segment `[t_i, t_{i+1}]` holding `t` (last segment for `t = T`).
    pub fn segment(&self, t: f64) -> usize {
        let i = (t / self.h).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.steps - 1)
        }
    }
}

/// Table `v[t_i][x]` on a uniform grid, linear in `t` between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    grid: TimeGrid,
    n: usize,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn from_values(grid: TimeGrid, n: usize, values: Vec<f64>) -> Result<Self, PdeError> {
        if values.len() != (grid.steps + 1) * n {
            return Err(PdeError::Dimension(format!(
                "{} values for {} nodes x {n} states",
                values.len(),
                grid.steps + 1
            )));
        }
        Ok(ValueFunction { grid, n, values })
    }

    /// Samples `f(t_i, x)` at every node.
    pub fn from_fn(grid: TimeGrid, n: usize, f: impl Fn(f64, usize) -> f64) -> Self {
        let values = grid.nodes().flat_map(|t| (0..n).map(move |x| (t, x))).map(|(t, x)| f(t, x)).collect();
        ValueFunction { grid, n, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn node_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn node_values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn initial(&self) -> &[f64] {
        self.node_values(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.node_values(self.grid.steps)
    }

    /// Linear interpolation of `v(t, x)`.
    pub fn at(&self, t: f64, x: usize) -> f64 {
        let i = self.grid.segment(t);
        let (t0, t1) = (self.grid.node(i), self.grid.node(i + 1));
        let theta = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let v0 = self.values[i * self.n + x];
        let v1 = self.values[(i + 1) * self.n + x];
        v0 + theta * (v1 - v0)
    }

    /// Whole state vector `v(t, .)`.
    pub fn row_at(&self, t: f64, out: &mut [f64]) {
        for (x, o) in out.iter_mut().enumerate() {
            *o = self.at(t, x);
        }
    }

    /// Finite-difference slope of `v(., x)` on the segment holding `t`.
    pub fn slope(&self, t: f64, x: usize) -> f64 {
        let i = self.grid.segment(t);
        let dt = self.grid.node(i + 1) - self.grid.node(i);
        (self.values[(i + 1) * self.n + x] - self.values[i * self.n + x]) / dt
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `t,state,value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,state,value")?;
        for i in 0..=self.grid.steps {
            let t = fmt_float(self.grid.node(i));
            for (x, v) in self.node_values(i).iter().enumerate() {
                writeln!(out, "{t},{x},{}", fmt_float(*v))?;
            }
        }
        Ok(())
    }
}

/// `f(model, at, x, y, z)`.
pub type DriverFn = dyn Fn(&Model, At, usize, f64, &[f64]) -> f64 + Send + Sync;
type LipschitzFn = dyn Fn(&Model) -> (f64, f64) + Send + Sync;

/// User-supplied driver with its Lipschitz constants `(L, L')`.
#[derive(Clone)]
pub struct CustomDriver {
    f: Arc<DriverFn>,
    lipschitz: Arc<LipschitzFn>,
    breakpoints: Vec<f64>,
}

impl CustomDriver {
    pub fn new<F>(f: F, l: f64, l_prime: f64) -> Result<Self, PdeError>
    where
        F: Fn(&Model, At, usize, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(l.is_finite() && l >= 0.0 && l_prime.is_finite() && l_prime >= 0.0) {
            return Err(PdeError::BadDriver(format!(
                "Lipschitz constants must be finite and nonnegative, got L={l}, L'={l_prime}"
            )));
        }
        Ok(CustomDriver {
            f: Arc::new(f),
            lipschitz: Arc::new(move |_| (l, l_prime)),
            breakpoints: Vec::new(),
        })
    }

    /// Declares extra time breakpoints where the driver is discontinuous.
    pub fn with_breakpoints(mut self, breakpoints: Vec<f64>) -> Self {
        self.breakpoints = breakpoints;
        self
    }
}

impl fmt::Debug for CustomDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDriver").field("breakpoints", &self.breakpoints).finish_non_exhaustive()
    }
}

/// `f = a(t,x) y + b(t,x) + sum_y c(t,x,y) z(y) nu(t,x,{y})`, tables per model cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDriver {
    n: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

/// Affine driver tables as they appear in a problem file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAffine {
    /// Per cell, length-`n` vector. Missing means zero.
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    /// Per cell, `n x n` matrix.
    #[serde(default)]
    pub c: Option<Vec<Vec<Vec<f64>>>>,
}

impl AffineDriver {
    pub fn new(model: &Model, raw: &RawAffine) -> Result<Self, PdeError> {
        let n = model.n_states();
        let m = model.cells().n_cells();
        let table = |name: &str, t: &Option<Vec<Vec<f64>>>| -> Result<Vec<Vec<f64>>, PdeError> {
            match t {
                None => Ok(vec![vec![0.0; n]; m]),
                Some(t) if t.len() == m && t.iter().all(|r| r.len() == n) => {
                    if t.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(PdeError::BadDriver(format!("non-finite entry in affine table {name}")));
                    }
                    Ok(t.clone())
                }
                Some(_) => Err(PdeError::Dimension(format!("affine table {name} must be {m} cells x {n} states"))),
            }
        };
        let a = table("a", &raw.a)?;
        let b = table("b", &raw.b)?;
        let c = match &raw.c {
            None => vec![vec![0.0; n * n]; m],
            Some(c) if c.len() == m && c.iter().all(|mat| mat.len() == n && mat.iter().all(|r| r.len() == n)) => {
                if c.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return Err(PdeError::BadDriver("non-finite entry in affine table c".into()));
                }
                c.iter().map(|mat| mat.iter().flatten().copied().collect()).collect()
            }
            Some(_) => {
                return Err(PdeError::Dimension(format!("affine table c must be {m} cells of {n}x{n}")));
            }
        };
        Ok(AffineDriver { n, a, b, c })
    }

    /// Constant source `f = b(x)` on every cell.
    pub fn source(model: &Model, b: &[f64]) -> Result<Self, PdeError> {
        let m = model.cells().n_cells();
        AffineDriver::new(model, &RawAffine { b: Some(vec![b.to_vec(); m]), ..Default::default() })
    }

    fn eval(&self, model: &Model, at: At, x: usize, y: f64, z: &[f64]) -> f64 {
        let k = model.cell_at(at);
        let c = &self.c[k][x * self.n..(x + 1) * self.n];
        let jump: f64 = model.row(k, x).iter().zip(c).zip(z).map(|((nu, c), z)| c * z * nu).sum();
        self.a[k][x] * y + self.b[k][x] + jump
    }

    fn lipschitz(&self, model: &Model) -> (f64, f64) {
        let mut l = 0.0_f64;
        let mut l_prime = 0.0_f64;
        for k in 0..self.a.len() {
            for x in 0..self.n {
                l_prime = l_prime.max(self.a[k][x].abs());
                let c = &self.c[k][x * self.n..(x + 1) * self.n];
                let s: f64 = model.row(k, x).iter().zip(c).map(|(nu, c)| c * c * nu).sum();
                l = l.max(s.sqrt());
            }
        }
        (l, l_prime)
    }
}

/// Generator `f(t, x, y, z)` of the backward equation.
#[derive(Debug, Clone)]
pub enum Driver {
    Zero,
    Affine(Arc<AffineDriver>),
    Hamiltonian(Arc<ControlModel>),
    Custom(CustomDriver),
}

impl Driver {
    pub fn tag(&self) -> &'static str {
        match self {
            Driver::Zero => "zero",
            Driver::Affine(_) => "affine",
            Driver::Hamiltonian(_) => "hamiltonian",
            Driver::Custom(_) => "custom",
        }
    }

    /// `z` is the full vector `v(t, .) - v(t, x)`, zero at `x`.
    pub fn eval(&self, model: &Model, at: At, x: usize, y: f64, z: &[f64]) -> f64 {
        match self {
            Driver::Zero => 0.0,
            Driver::Affine(a) => a.eval(model, at, x, y, z),
            Driver::Hamiltonian(cm) => control::hamiltonian_value(model, cm, at, x, z),
            Driver::Custom(c) => (c.f)(model, at, x, y, z),
        }
    }

    /// Declared `(L, L')`: Lipschitz in `z` (in `L^2(nu)`) and in `y`.
    pub fn lipschitz(&self, model: &Model) -> (f64, f64) {
        match self {
            Driver::Zero => (0.0, 0.0),
            Driver::Affine(a) => a.lipschitz(model),
            Driver::Hamiltonian(cm) => control::lipschitz_bounds(model, cm),
            Driver::Custom(c) => (c.lipschitz)(model),
        }
    }

    /// Times where the driver data may jump, beyond the model cells.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Driver::Hamiltonian(cm) => cm.cells().breaks().to_vec(),
            Driver::Custom(c) => c.breakpoints.clone(),
            _ => Vec::new(),
        }
    }
}

/// Grid for solving: `h` must divide `T` and hit every breakpoint.
pub fn solver_grid(model: &Model, driver: &Driver, h: f64) -> Result<TimeGrid, PdeError> {
    let mut aligned = model.cells().breaks().to_vec();
    aligned.extend(driver.breakpoints());
    TimeGrid::new(model.horizon(), h, &aligned)
}

fn check_terminal(model: &Model, g: &[f64]) -> Result<(), PdeError> {
    if g.len() != model.n_states() {
        return Err(PdeError::Dimension(format!(
            "terminal vector of length {} for {} states",
            g.len(),
            model.n_states()
        )));
    }
    if let Some(x) = g.iter().position(|v| !v.is_finite()) {
        return Err(PdeError::NonFiniteValue { t: model.horizon(), state: x });
    }
    Ok(())
}

/// `out[x] = (L_t v)(x) + f(t, x, v(x), v - v(x))`.
struct Rhs<'a> {
    model: &'a Model,
    driver: &'a Driver,
    z: Vec<f64>,
}

impl<'a> Rhs<'a> {
    fn new(model: &'a Model, driver: &'a Driver) -> Self {
        Rhs { model, driver, z: vec![0.0; model.n_states()] }
    }

    fn eval(&mut self, at: At, v: &[f64], out: &mut [f64]) {
        let k = self.model.cell_at(at);
        for x in 0..v.len() {
            for (zy, vy) in self.z.iter_mut().zip(v) {
                *zy = vy - v[x];
            }
            out[x] = self.model.generator_at_state(k, x, v) + self.driver.eval(self.model, at, x, v[x], &self.z);
        }
    }
}

/// Classical RK4 backward from `v(T) = g` at fixed step `h`.
pub fn solve_kolmogorov(model: &Model, driver: &Driver, g: &[f64], h: f64) -> Result<ValueFunction, PdeError> {
    check_terminal(model, g)?;
    let grid = solver_grid(model, driver, h)?;
    if model.lambda_max() * grid.step() > 0.1 {
        log::warn!(
            "rate bound {} times step {} exceeds 0.1; explicit integration may be inaccurate",
            model.lambda_max(),
            grid.step()
        );
    }
    let n = model.n_states();
    let steps = grid.steps();
    let mut values = vec![0.0; (steps + 1) * n];
    values[steps * n..].copy_from_slice(g);

    let mut rhs = Rhs::new(model, driver);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut stage = vec![0.0; n];
    for i in (0..steps).rev() {
        let (t0, t1) = (grid.node(i), grid.node(i + 1));
        let dt = t1 - t0;
        let mid = 0.5 * (t0 + t1);
        let (head, tail) = values.split_at_mut((i + 1) * n);
        let v1 = &tail[..n];
        let v0 = &mut head[i * n..];

        // dv/dt = -F(t, v), stepping from t1 down to t0
        rhs.eval(At::left(t1), v1, &mut k1);
        for x in 0..n {
            stage[x] = v1[x] + 0.5 * dt * k1[x];
        }
        rhs.eval(At::right(mid), &stage, &mut k2);
        for x in 0..n {
            stage[x] = v1[x] + 0.5 * dt * k2[x];
        }
        rhs.eval(At::right(mid), &stage, &mut k3);
        for x in 0..n {
            stage[x] = v1[x] + dt * k3[x];
        }
        rhs.eval(At::right(t0), &stage, &mut k4);
        for x in 0..n {
            let next = v1[x] + dt / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
            if !next.is_finite() {
                return Err(PdeError::NonFiniteValue { t: t0, state: x });
            }
            v0[x] = next;
        }
    }
    ValueFunction::from_values(grid, n, values)
}

/// One application of the integral map with trapezoidal quadrature:
/// `Gamma(u)(t_i) = g + sum_{j >= i} h/2 (F(t_j+, u_j) + F(t_{j+1}-, u_{j+1}))`.
pub fn picard_map(model: &Model, driver: &Driver, g: &[f64], u: &ValueFunction) -> Result<ValueFunction, PdeError> {
    check_terminal(model, g)?;
    let n = model.n_states();
    if u.n_states() != n {
        return Err(PdeError::Dimension(format!("value function has {} states, model {n}", u.n_states())));
    }
    let grid = *u.grid();
    let steps = grid.steps();
    let mut out = vec![0.0; (steps + 1) * n];
    out[steps * n..].copy_from_slice(g);
    let mut rhs = Rhs::new(model, driver);
    let mut f_right = vec![0.0; n];
    let mut f_left = vec![0.0; n];
    for i in (0..steps).rev() {
        let (t0, t1) = (grid.node(i), grid.node(i + 1));
        rhs.eval(At::right(t0), u.node_values(i), &mut f_right);
        rhs.eval(At::left(t1), u.node_values(i + 1), &mut f_left);
        for x in 0..n {
            let next = out[(i + 1) * n + x] + 0.5 * (t1 - t0) * (f_right[x] + f_left[x]);
            if !next.is_finite() {
                return Err(PdeError::NonFiniteValue { t: t0, state: x });
            }
            out[i * n + x] = next;
        }
    }
    ValueFunction::from_values(grid, n, out)
}

/// Sup-norm Lipschitz constant of `u -> L u + f(u)`: `2 Lambda + L' + 2 L sqrt(Lambda)`.
pub fn integrand_lipschitz(model: &Model, driver: &Driver) -> f64 {
    let (l, l_prime) = driver.lipschitz(model);
    let lambda = model.lambda_max();
    2.0 * lambda + l_prime + 2.0 * l * lambda.sqrt()
}

/// Growth factor `exp((L' + 2 L sqrt(Lambda)) T)` bounding
/// `sup |v1 - v2| / max |g1 - g2|` for two terminal vectors.
pub fn stability_factor(model: &Model, driver: &Driver) -> f64 {
    let (l, l_prime) = driver.lipschitz(model);
    ((l_prime + 2.0 * l * model.lambda_max().sqrt()) * model.horizon()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Weight exponent of the norm `sup_t e^{beta (t - T)} |u(t)|`; defaults
    /// to twice the integrand Lipschitz constant.
    pub beta: Option<f64>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { max_iter: 100, tol: 1e-12, beta: None }
    }
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    pub value: ValueFunction,
    /// Plain sup-norm differences of successive iterates.
    pub diffs: Vec<f64>,
    /// Same differences in the weighted norm.
    pub weighted_diffs: Vec<f64>,
    pub beta: f64,
    /// Guaranteed contraction factor of the discrete map in the weighted norm.
    pub alpha: f64,
    pub converged: bool,
}

/// Iterates [`picard_map`] from `v0` until the sup-norm step drops below
/// `tol` or `max_iter` is reached.
pub fn picard_iterate(
    model: &Model,
    driver: &Driver,
    g: &[f64],
    v0: &ValueFunction,
    opts: PicardOptions,
) -> Result<PicardResult, PdeError> {
    if opts.max_iter == 0 {
        return Err(PdeError::BadStep("need at least one Picard iteration".into()));
    }
    let lip = integrand_lipschitz(model, driver);
    let beta = opts.beta.unwrap_or(2.0 * lip);
    let grid = *v0.grid();
    let weights: Vec<f64> = grid.nodes().map(|t| (beta * (t - grid.horizon())).exp()).collect();

    // alpha = K * max_i w_i * sum_{j >= i} h/2 (1/w_j + 1/w_{j+1})
    let mut alpha = 0.0_f64;
    let mut tail = 0.0;
    for i in (0..grid.steps()).rev() {
        let dt = grid.node(i + 1) - grid.node(i);
        tail += 0.5 * dt * (1.0 / weights[i] + 1.0 / weights[i + 1]);
        alpha = alpha.max(lip * weights[i] * tail);
    }

    let n = model.n_states();
    let mut current = v0.clone();
    let mut diffs = Vec::new();
    let mut weighted_diffs = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let next = picard_map(model, driver, g, &current)?;
        let mut sup = 0.0_f64;
        let mut wsup = 0.0_f64;
        for (i, w) in weights.iter().enumerate() {
            let row = next.node_values(i).iter().zip(current.node_values(i));
            let d = row.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            sup = sup.max(d);
            wsup = wsup.max(w * d);
        }
        debug_assert_eq!(next.n_states(), n);
        diffs.push(sup);
        weighted_diffs.push(wsup);
        current = next;
        if sup <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(PicardResult { value: current, diffs, weighted_diffs, beta, alpha, converged })
}

/// Max defect `|v(t_i) - Gamma(v)(t_i)|` over all nodes and states.
pub fn residual_norm(model: &Model, driver: &Driver, g: &[f64], v: &ValueFunction) -> Result<f64, PdeError> {
    let image = picard_map(model, driver, g, v)?;
    Ok(image.sup_distance(v))
}

/// Clamps the driver output and the terminal vector to `[-level, level]`.
/// The clamped driver keeps the original Lipschitz constants.
pub fn truncate(driver: &Driver, g: &[f64], level: f64) -> Result<(Driver, Vec<f64>), PdeError> {
    if !(level > 0.0) {
        return Err(PdeError::BadDriver(format!("truncation level must be positive, got {level}")));
    }
    let inner = driver.clone();
    let lip_inner = driver.clone();
    let truncated = CustomDriver {
        f: Arc::new(move |model: &Model, at: At, x: usize, y: f64, z: &[f64]| {
            inner.eval(model, at, x, y, z).clamp(-level, level)
        }),
        lipschitz: Arc::new(move |model: &Model| lip_inner.lipschitz(model)),
        breakpoints: driver.breakpoints(),
    };
    let g_n = g.iter().map(|v| v.clamp(-level, level)).collect();
    Ok((Driver::Custom(truncated), g_n))
}
