//! Pathwise and Monte Carlo checks of the backward equation
//!
//! ```text
//! Y_s + int_s^T int Z q(dr dy) = g(X_T) + int_s^T f(r, X_r, Y_r, Z_r) dr
//! ```
//!
//! with `(Y, Z)` read off a value function: `Y_s = v(s, X_s)` and
//! `Z_s(y) = v(s, y) - v(s, X_{s-})`.

use thiserror::Error;

use crate::mc::{self, Estimate};
use crate::model::{At, Model};
use crate::pde::{Driver, PdeError, ValueFunction};
use crate::simulate::{self, Integrand, MarkedPath, Quadrature, Segment, SimulateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// `(Y, Z)` along one path.
#[derive(Debug, Clone)]
pub struct PathYZ<'a> {
    v: &'a ValueFunction,
    path: &'a MarkedPath,
    times: Vec<f64>,
    y: Vec<f64>,
}

/// Materializes `Y` at the grid nodes inside the path window and at every
/// jump time.
pub fn yz_from_value<'a>(v: &'a ValueFunction, path: &'a MarkedPath) -> PathYZ<'a> {
    let mut times: Vec<f64> = grid_nodes_from(v, path.start_time).collect();
    times.extend(path.jump_times.iter().copied());
    times.push(path.start_time);
    let times = simulate::tidy_breaks(times, path.horizon);
    let y = times.iter().map(|&s| v.at(s, path.state_at(s))).collect();
    PathYZ { v, path, times, y }
}

impl PathYZ<'_> {
    /// Times at which `Y` was materialized, ascending.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `Y` at [`PathYZ::times`].
    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// `Y_s = v(s, X_s)`.
    pub fn y(&self, s: f64) -> f64 {
        self.v.at(s, self.path.state_at(s))
    }

    /// `Y_{s-} = v(s, X_{s-})`.
    pub fn y_before(&self, s: f64) -> f64 {
        self.v.at(s, self.path.state_before(s))
    }

    /// `Z_s(y) = v(s, y) - v(s, X_{s-})`.
    pub fn z(&self, s: f64, y: usize) -> f64 {
        let pre = self.path.state_before(s);
        if y == pre {
            0.0
        } else {
            self.v.at(s, y) - self.v.at(s, pre)
        }
    }
}

/// `Z` as an integrand for [`simulate::stochastic_integral`].
pub struct ZIntegrand<'a> {
    pub v: &'a ValueFunction,
}

impl Integrand for ZIntegrand<'_> {
    fn eval(&self, s: At, pre: usize, y: usize) -> f64 {
        if y == pre {
            0.0
        } else {
            self.v.at(s.t, y) - self.v.at(s.t, pre)
        }
    }

    fn quadrature(&self) -> Quadrature {
        Quadrature::Subgrid(self.v.grid().step())
    }
}

fn grid_nodes_from(v: &ValueFunction, lo: f64) -> impl Iterator<Item = f64> + '_ {
    let eps = 1e-12 * v.grid().horizon().abs().max(1.0);
    v.grid().nodes().filter(move |&s| s >= lo - eps)
}

fn check_pair(model: &Model, v: &ValueFunction, path: &MarkedPath) -> Result<(), BsdeError> {
    if v.n_states() != model.n_states() {
        return Err(BsdeError::Dimension(format!(
            "value function has {} states, model {}",
            v.n_states(),
            model.n_states()
        )));
    }
    let eps = 1e-12 * model.horizon().max(1.0);
    if (v.grid().horizon() - model.horizon()).abs() > eps || (path.horizon - model.horizon()).abs() > eps {
        return Err(BsdeError::Dimension("horizons of model, value function and path differ".into()));
    }
    Ok(())
}

/// Simpson's rule of `phi(s, X_s)` over each piece of `path` cut at
/// `breaks`, returned per piece.
fn piece_integrals(
    path: &MarkedPath,
    breaks: &[f64],
    mut phi: impl FnMut(At, usize) -> f64,
) -> Vec<(Segment, f64)> {
    path.pieces(breaks, path.start_time, path.horizon)
        .into_iter()
        .map(|p| {
            let fa = phi(At::right(p.a), p.state);
            let fm = phi(At::right(0.5 * (p.a + p.b)), p.state);
            let fb = phi(At::left(p.b), p.state);
            let integral = (p.b - p.a) / 6.0 * (fa + 4.0 * fm + fb);
            (p, integral)
        })
        .collect()
}

/// Suffix sums of per-piece integrals: `int_c^T` for each ascending
/// checkpoint `c` that is a piece boundary.
fn suffix_at(pieces: &[(Segment, f64)], checkpoints: &[f64], horizon: f64) -> Vec<f64> {
    let eps = 1e-12 * horizon.abs().max(1.0);
    let mut out = vec![0.0; checkpoints.len()];
    let (mut acc, mut comp) = (0.0, 0.0);
    let mut j = pieces.len();
    for (i, &c) in checkpoints.iter().enumerate().rev() {
        while j > 0 && pieces[j - 1].0.a >= c - eps {
            j -= 1;
            neumaier(&mut acc, &mut comp, pieces[j].1);
        }
        out[i] = acc + comp;
    }
    out
}

/// Prefix sums of per-piece integrals: `int_t^c` for each ascending
/// checkpoint `c` that is a piece boundary.
fn prefix_at(pieces: &[(Segment, f64)], checkpoints: &[f64], horizon: f64) -> Vec<f64> {
    let eps = 1e-12 * horizon.abs().max(1.0);
    let mut out = vec![0.0; checkpoints.len()];
    let (mut acc, mut comp) = (0.0, 0.0);
    let mut j = 0;
    for (i, &c) in checkpoints.iter().enumerate() {
        while j < pieces.len() && pieces[j].0.b <= c + eps {
            neumaier(&mut acc, &mut comp, pieces[j].1);
            j += 1;
        }
        out[i] = acc + comp;
    }
    out
}

fn neumaier(sum: &mut f64, comp: &mut f64, v: f64) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}

fn eval_driver(model: &Model, driver: &Driver, v: &ValueFunction, at: At, x: usize, row: &mut [f64], z: &mut [f64]) -> f64 {
    v.row_at(at.t, row);
    for (zy, ry) in z.iter_mut().zip(row.iter()) {
        *zy = ry - row[x];
    }
    driver.eval(model, at, x, row[x], z)
}

fn quadrature_grid(model: &Model, driver: &Driver, v: &ValueFunction, path: &MarkedPath) -> Vec<f64> {
    simulate::quadrature_breaks(
        model,
        Quadrature::Subgrid(v.grid().step()),
        path.start_time,
        path.horizon,
        &driver.breakpoints(),
    )
}

/// Defect `Y_s + int Z q - g(X_T) - int f dr` at every grid node `s` in
/// the path window, one entry per node in ascending order.
pub fn bsde_defects(
    model: &Model,
    driver: &Driver,
    g: &[f64],
    v: &ValueFunction,
    path: &MarkedPath,
) -> Result<Vec<(f64, f64)>, BsdeError> {
    check_pair(model, v, path)?;
    if g.len() != model.n_states() {
        return Err(BsdeError::Dimension(format!("g has length {}, expected {}", g.len(), model.n_states())));
    }
    let nodes: Vec<f64> = grid_nodes_from(v, path.start_time).collect();
    let q = simulate::stochastic_integral_profile(model, path, &ZIntegrand { v }, &nodes)?;
    let breaks = quadrature_grid(model, driver, v, path);
    let n = model.n_states();
    let (mut row, mut z) = (vec![0.0; n], vec![0.0; n]);
    let pieces = piece_integrals(path, &breaks, |at, x| eval_driver(model, driver, v, at, x, &mut row, &mut z));
    let f = suffix_at(&pieces, &nodes, path.horizon);
    let terminal = g[path.final_state()];
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let ys = v.at(s, path.state_at(s));
            (s, ys + q[i].q_part - terminal - f[i])
        })
        .collect())
}

/// Max absolute [`bsde_defects`] entry.
pub fn bsde_residual(
    model: &Model,
    driver: &Driver,
    g: &[f64],
    v: &ValueFunction,
    path: &MarkedPath,
) -> Result<f64, BsdeError> {
    Ok(bsde_defects(model, driver, g, v, path)?
        .into_iter()
        .map(|(_, d)| d.abs())
        .fold(0.0, f64::max))
}

/// Max over grid nodes `s` of the defect in
/// `v(s, X_s) = v(t, x) + int (d_r v + L_r v) dr + int int Z q`,
/// with `d_r v` the finite-difference slope of the piecewise-linear table.
pub fn verify_ito(model: &Model, v: &ValueFunction, path: &MarkedPath) -> Result<f64, BsdeError> {
    check_pair(model, v, path)?;
    let nodes: Vec<f64> = grid_nodes_from(v, path.start_time).collect();
    let zi = ZIntegrand { v };
    let breaks = simulate::quadrature_breaks(model, zi.quadrature(), path.start_time, path.horizon, &nodes);
    let n = model.n_states();
    let mut row = vec![0.0; n];
    let pieces = piece_integrals(path, &breaks, |at, x| {
        // the slope is constant on the grid segment holding the piece interior
        let inner = match at.side {
            crate::model::Side::Right => at.t,
            crate::model::Side::Left => at.t - 1e-9 * v.grid().step(),
        };
        v.row_at(at.t, &mut row);
        let k = model.cell_at(at);
        v.slope(inner, x) + model.generator_at_state(k, x, &row)
    });
    let drift = prefix_at(&pieces, &nodes, path.horizon);
    let mut checkpoints = vec![path.start_time];
    checkpoints.extend_from_slice(&nodes);
    // q over (t, s] as the difference of the tails over (t, T] and (s, T]
    let tails = simulate::stochastic_integral_profile(model, path, &zi, &checkpoints)?;
    let start = v.at(path.start_time, path.start_state);
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let q = tails[0].q_part - tails[i + 1].q_part;
            (v.at(s, path.state_at(s)) - start - drift[i] - q).abs()
        })
        .fold(0.0, f64::max))
}

/// Monte Carlo estimates of both sides of
///
/// ```text
/// e^{bt} Y_t^2 + b E int e^{br} Y_r^2 dr + E int int e^{br} Z_r(y)^2 nu dr
///     = E e^{bT} g(X_T)^2 + 2 E int e^{br} Y_r f_r dr
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyGap {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `lhs - rhs` with the SE of the per-path difference.
    pub gap: Estimate,
}

/// `f_r` is `source` evaluated along `(Y, Z)`; `xi = g(X_T)` with `g` the
/// terminal row of `v`.
#[allow(clippy::too_many_arguments)]
pub fn energy_identity_gap(
    model: &Model,
    v: &ValueFunction,
    source: &Driver,
    t: f64,
    x: usize,
    beta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<EnergyGap, BsdeError> {
    if n_paths < 2 {
        return Err(BsdeError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    if !beta.is_finite() {
        return Err(BsdeError::Invalid(format!("beta = {beta}")));
    }
    let horizon = model.horizon();
    if !(t >= 0.0 && t <= horizon) || x >= model.n_states() {
        return Err(BsdeError::Invalid(format!("start ({t}, {x}) outside the domain")));
    }
    let g = v.terminal().to_vec();
    let n = model.n_states();
    let samples = mc::collect_paths(n_paths, seed, |stream| -> Result<(f64, f64), BsdeError> {
        let path = simulate::simulate_unchecked(model, t, x, &mut stream.rng());
        check_pair(model, v, &path)?;
        let breaks = quadrature_grid(model, source, v, &path);
        let (mut row, mut z) = (vec![0.0; n], vec![0.0; n]);
        let mut lhs_int = 0.0;
        let mut rhs_int = 0.0;
        for p in path.pieces(&breaks, path.start_time, path.horizon) {
            let mut node = |at: At| {
                let w = (beta * at.t).exp();
                let f = eval_driver(model, source, v, at, p.state, &mut row, &mut z);
                let y = row[p.state];
                let k = model.cell_at(at);
                let z2: f64 = model.row(k, p.state).iter().zip(&z).map(|(nu, zy)| nu * zy * zy).sum();
                (w * (beta * y * y + z2), 2.0 * w * y * f)
            };
            let a = node(At::right(p.a));
            let m = node(At::right(0.5 * (p.a + p.b)));
            let b = node(At::left(p.b));
            let width = (p.b - p.a) / 6.0;
            lhs_int += width * (a.0 + 4.0 * m.0 + b.0);
            rhs_int += width * (a.1 + 4.0 * m.1 + b.1);
        }
        let y_t = v.at(t, x);
        let xi = g[path.final_state()];
        let lhs = (beta * t).exp() * y_t * y_t + lhs_int;
        let rhs = (beta * horizon).exp() * xi * xi + rhs_int;
        Ok((lhs, rhs))
    });
    let samples: Vec<(f64, f64)> = samples.into_iter().collect::<Result<_, _>>()?;
    let lhs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let rhs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let gap: Vec<f64> = samples.iter().map(|s| s.0 - s.1).collect();
    Ok(EnergyGap { lhs: mc::summarize(&lhs), rhs: mc::summarize(&rhs), gap: mc::summarize(&gap) })
}

/// Mean and SE of `g(X_T) + int_t^T f(r, X_r, Y_r, Z_r) dr`, whose
/// expectation is `v(t, x)` when `v` solves the problem for `(driver, g)`.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_mean(
    model: &Model,
    driver: &Driver,
    g: &[f64],
    v: &ValueFunction,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, BsdeError> {
    if n_paths < 2 {
        return Err(BsdeError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    if g.len() != model.n_states() {
        return Err(BsdeError::Dimension(format!("g has length {}, expected {}", g.len(), model.n_states())));
    }
    if !(t >= 0.0 && t <= model.horizon()) || x >= model.n_states() {
        return Err(BsdeError::Invalid(format!("start ({t}, {x}) outside the domain")));
    }
    let n = model.n_states();
    let samples = mc::collect_paths(n_paths, seed, |stream| -> Result<f64, BsdeError> {
        let path = simulate::simulate_unchecked(model, t, x, &mut stream.rng());
        check_pair(model, v, &path)?;
        let running = match driver {
            Driver::Zero => 0.0,
            _ => {
                let breaks = quadrature_grid(model, driver, v, &path);
                let (mut row, mut z) = (vec![0.0; n], vec![0.0; n]);
                let pieces =
                    piece_integrals(&path, &breaks, |at, x| eval_driver(model, driver, v, at, x, &mut row, &mut z));
                mc::compensated_sum(pieces.into_iter().map(|(_, f)| f))
            }
        };
        Ok(g[path.final_state()] + running)
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_, _>>()?;
    Ok(mc::summarize(&samples))
}

/// `E int_t^T |Y^1 - Y^2|^2 dr + E int int |Z^1 - Z^2|^2 nu dr` for two
/// value functions on a common model, estimated along shared paths.
#[allow(clippy::too_many_arguments)]
pub fn difference_norm(
    model: &Model,
    v1: &ValueFunction,
    v2: &ValueFunction,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, BsdeError> {
    if n_paths < 2 {
        return Err(BsdeError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    if v1.n_states() != v2.n_states() {
        return Err(BsdeError::Dimension("value functions differ in state count".into()));
    }
    let h = v1.grid().step().min(v2.grid().step());
    let n = model.n_states();
    let samples = mc::collect_paths(n_paths, seed, |stream| -> Result<f64, BsdeError> {
        let path = simulate::simulate_unchecked(model, t, x, &mut stream.rng());
        check_pair(model, v1, &path)?;
        check_pair(model, v2, &path)?;
        let breaks = simulate::quadrature_breaks(model, Quadrature::Subgrid(h), t, path.horizon, &[]);
        let (mut r1, mut r2) = (vec![0.0; n], vec![0.0; n]);
        let pieces = piece_integrals(&path, &breaks, |at, x| {
            v1.row_at(at.t, &mut r1);
            v2.row_at(at.t, &mut r2);
            let dy = r1[x] - r2[x];
            let k = model.cell_at(at);
            let dz: f64 = (0..n)
                .map(|y| {
                    let d = (r1[y] - r1[x]) - (r2[y] - r2[x]);
                    model.rate(k, x, y) * d * d
                })
                .sum();
            dy * dy + dz
        });
        Ok(mc::compensated_sum(pieces.into_iter().map(|(_, v)| v)))
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_, _>>()?;
    Ok(mc::summarize(&samples))
}
