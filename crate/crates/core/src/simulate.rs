//! Exact simulation of the marked point process `(T_n, X_{T_n})` and
//! pathwise integrals against the jump measure `p(ds dy)` and its
//! compensator `nu(s, X_{s-}, dy) ds`.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::mc::{self, Estimate};
use crate::model::{At, Model, ModelError};
use crate::table::fmt_float;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("rate measure total {total} at (t={t}, x={x}) exceeds declared bound {bound}")]
    RateBoundExceeded { t: f64, x: usize, total: f64, bound: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Default width of the quadrature subgrid for integrands that vary
/// continuously in time.
pub const DEFAULT_QUAD_WIDTH: f64 = 1e-3;

/// One realization of the jump chain on `[start_time, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedPath {
    pub start_time: f64,
    pub start_state: usize,
    pub horizon: f64,
    pub jump_times: Vec<f64>,
    pub marks: Vec<usize>,
}

/// Constant-state stretch `[a, b)` of a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub state: usize,
}

impl MarkedPath {
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Right-continuous state `X_s`.
    pub fn state_at(&self, s: f64) -> usize {
        let idx = self.jump_times.partition_point(|&tn| tn <= s);
        self.state_after(idx)
    }

    /// Left limit `X_{s-}`.
    pub fn state_before(&self, s: f64) -> usize {
        let idx = self.jump_times.partition_point(|&tn| tn < s);
        self.state_after(idx)
    }

    fn state_after(&self, n_jumps: usize) -> usize {
        if n_jumps == 0 {
            self.start_state
        } else {
            self.marks[n_jumps - 1]
        }
    }

    pub fn final_state(&self) -> usize {
        self.state_after(self.jump_times.len())
    }

    /// `(time, from, to)` for every jump.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.jump_times
            .iter()
            .enumerate()
            .map(move |(i, &tn)| (tn, self.state_after(i), self.marks[i]))
    }

    /// Nonempty constant-state segments covering `[start_time, horizon]`.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut a = self.start_time;
        let mut state = self.start_state;
        for (&tn, &mark) in self.jump_times.iter().zip(&self.marks) {
            if tn > a {
                out.push(Segment { a, b: tn, state });
            }
            a = tn;
            state = mark;
        }
        if self.horizon > a {
            out.push(Segment { a, b: self.horizon, state });
        }
        out
    }

    /// Splits `[lo, hi]` into pieces of constant state that do not straddle
    /// any of `breaks` (sorted ascending).
    pub fn pieces(&self, breaks: &[f64], lo: f64, hi: f64) -> Vec<Segment> {
        let mut out = Vec::new();
        for seg in self.segments() {
            let a = seg.a.max(lo);
            let b = seg.b.min(hi);
            if b <= a {
                continue;
            }
            let mut left = a;
            let start = breaks.partition_point(|&s| s <= a);
            for &s in &breaks[start..] {
                if s >= b {
                    break;
                }
                out.push(Segment { a: left, b: s, state: seg.state });
                left = s;
            }
            out.push(Segment { a: left, b, state: seg.state });
        }
        out
    }
}

/// Rate measure given by a callback, used by the thinning sampler.
pub trait RateMeasure: Sync {
    fn n_states(&self) -> usize;
    fn horizon(&self) -> f64;
    /// Declared bound on the total rate `sum_y nu(t, x, {y})`.
    fn bound(&self) -> f64;
    /// Writes `nu(t, x, {y})` for all `y` into `out`.
    fn rates(&self, t: f64, x: usize, out: &mut [f64]);
}

impl RateMeasure for Model {
    fn n_states(&self) -> usize {
        Model::n_states(self)
    }

    fn horizon(&self) -> f64 {
        Model::horizon(self)
    }

    fn bound(&self) -> f64 {
        self.lambda_max()
    }

    fn rates(&self, t: f64, x: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(self.cell_at(At::right(t)), x));
    }
}

/// Closure-backed [`RateMeasure`].
pub struct CallbackRates<F> {
    pub n_states: usize,
    pub horizon: f64,
    pub bound: f64,
    pub rates: F,
}

impl<F> RateMeasure for CallbackRates<F>
where
    F: Fn(f64, usize, &mut [f64]) + Sync,
{
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn rates(&self, t: f64, x: usize, out: &mut [f64]) {
        (self.rates)(t, x, out)
    }
}

fn positive_exp<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let e: f64 = Exp1.sample(rng);
        if e > 0.0 {
            return e;
        }
    }
}

/// Draws `y` with probability proportional to `weights[y]`.
fn categorical<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (y, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = y;
            if u < acc {
                return y;
            }
        }
    }
    last
}

fn check_start(model: &Model, t: f64, x: usize) -> Result<(), SimulateError> {
    if !(t >= 0.0 && t <= model.horizon()) {
        return Err(ModelError::OutOfRange(format!("start time {t} outside [0, {}]", model.horizon())).into());
    }
    if x >= model.n_states() {
        return Err(ModelError::OutOfRange(format!("state {x} outside 0..{}", model.n_states())).into());
    }
    Ok(())
}

/// Next jump after `t` by exact inversion of the piecewise-linear
/// integrated hazard; `None` when no jump occurs before the horizon.
pub fn sample_first_jump<R: Rng + ?Sized>(
    model: &Model,
    t: f64,
    x: usize,
    rng: &mut R,
) -> Result<Option<(f64, usize)>, SimulateError> {
    if !(t >= 0.0 && t < model.horizon()) {
        return Err(ModelError::OutOfRange(format!("time {t} outside [0, {})", model.horizon())).into());
    }
    check_start(model, t, x)?;
    Ok(first_jump(model, t, x, rng))
}

fn first_jump<R: Rng + ?Sized>(model: &Model, t: f64, x: usize, rng: &mut R) -> Option<(f64, usize)> {
    let cells = model.cells();
    if t >= model.horizon() {
        return None;
    }
    let mut remaining = positive_exp(rng);
    for k in cells.locate(At::right(t))..cells.n_cells() {
        let (s0, s1) = cells.bounds(k);
        let a = s0.max(t);
        let lambda = model.lambda_in_cell(k, x);
        if lambda <= 0.0 {
            continue;
        }
        let budget = lambda * (s1 - a);
        if remaining <= budget {
            let s = (a + remaining / lambda).min(s1);
            // the hazard was consumed in cell k, so the mark uses k's row
            let y = categorical(model.row(k, x), lambda, rng);
            return Some((s, y));
        }
        remaining -= budget;
    }
    None
}

/// Iterates [`sample_first_jump`] until no jump remains before the horizon.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &Model,
    t: f64,
    x: usize,
    rng: &mut R,
) -> Result<MarkedPath, SimulateError> {
    check_start(model, t, x)?;
    Ok(simulate_unchecked(model, t, x, rng))
}

pub(crate) fn simulate_unchecked<R: Rng + ?Sized>(model: &Model, t: f64, x: usize, rng: &mut R) -> MarkedPath {
    let mut path = MarkedPath {
        start_time: t,
        start_state: x,
        horizon: model.horizon(),
        jump_times: Vec::new(),
        marks: Vec::new(),
    };
    let mut now = t;
    let mut state = x;
    while let Some((s, y)) = first_jump(model, now, state, rng) {
        path.jump_times.push(s);
        path.marks.push(y);
        now = s;
        state = y;
    }
    path
}

/// Thinning sampler for an arbitrary bounded rate measure: candidate times
/// from a rate-`bound` Poisson clock, accepted with probability
/// `lambda(s, x) / bound`.
pub fn simulate_path_thinning<M: RateMeasure + ?Sized, R: Rng + ?Sized>(
    rates: &M,
    t: f64,
    x: usize,
    rng: &mut R,
) -> Result<MarkedPath, SimulateError> {
    let horizon = rates.horizon();
    let n = rates.n_states();
    if !(t >= 0.0 && t <= horizon) || x >= n {
        return Err(ModelError::OutOfRange(format!("start ({t}, {x}) outside the state/time domain")).into());
    }
    let bound = rates.bound();
    if !(bound.is_finite() && bound >= 0.0) {
        return Err(SimulateError::Invalid(format!("rate bound {bound} must be finite and nonnegative")));
    }
    let mut path = MarkedPath {
        start_time: t,
        start_state: x,
        horizon,
        jump_times: Vec::new(),
        marks: Vec::new(),
    };
    if bound == 0.0 {
        return Ok(path);
    }
    let mut buf = vec![0.0; n];
    let mut now = t;
    let mut state = x;
    loop {
        now += positive_exp(rng) / bound;
        if now > horizon {
            return Ok(path);
        }
        rates.rates(now, state, &mut buf);
        buf[state] = 0.0;
        let total: f64 = buf.iter().sum();
        if total > bound * (1.0 + 1e-12) {
            return Err(SimulateError::RateBoundExceeded { t: now, x: state, total, bound });
        }
        if rng.random::<f64>() * bound < total {
            let y = categorical(&buf, total, rng);
            path.jump_times.push(now);
            path.marks.push(y);
            state = y;
        }
    }
}

/// How the compensator integral of an integrand is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    /// Integrand constant in time on each model cell: exact.
    CellConstant,
    /// Simpson's rule on a subgrid of multiples of the given width (plus
    /// cell breakpoints and jump times); exact for integrands that are
    /// piecewise linear on that subgrid.
    Subgrid(f64),
}

/// Integrand `H(s, x_pre, y)` where `x_pre = X_{s-}`.
pub trait Integrand: Sync {
    fn eval(&self, s: At, pre: usize, y: usize) -> f64;

    fn quadrature(&self) -> Quadrature {
        Quadrature::CellConstant
    }
}

/// Closure-backed integrand.
pub struct FnIntegrand<F> {
    f: F,
    quadrature: Quadrature,
}

impl<F> FnIntegrand<F>
where
    F: Fn(f64, usize, usize) -> f64 + Sync,
{
    pub fn new(f: F, quadrature: Quadrature) -> Self {
        FnIntegrand { f, quadrature }
    }
}

impl<F> Integrand for FnIntegrand<F>
where
    F: Fn(f64, usize, usize) -> f64 + Sync,
{
    fn eval(&self, s: At, pre: usize, y: usize) -> f64 {
        (self.f)(s.t, pre, y)
    }

    fn quadrature(&self) -> Quadrature {
        self.quadrature
    }
}

/// `int int H p(ds dy)`, `int int H nu(s, X_s, dy) ds` and their difference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntegralPair {
    pub p_part: f64,
    pub nu_part: f64,
    pub q_part: f64,
}

impl IntegralPair {
    fn new(p_part: f64, nu_part: f64) -> Self {
        IntegralPair { p_part, nu_part, q_part: p_part - nu_part }
    }
}

/// Sorted breakpoints for piece decomposition: model cells plus, for
/// subgrid quadrature, multiples of the width inside `(lo, hi)`.
pub(crate) fn quadrature_breaks(model: &Model, quadrature: Quadrature, lo: f64, hi: f64, extra: &[f64]) -> Vec<f64> {
    let mut breaks: Vec<f64> = model.cells().breaks().to_vec();
    if let Quadrature::Subgrid(w) = quadrature {
        let first = (lo / w).ceil() as i64;
        let last = (hi / w).floor() as i64;
        breaks.extend((first.max(0)..=last).map(|k| k as f64 * w));
    }
    breaks.extend_from_slice(extra);
    tidy_breaks(breaks, hi)
}

pub(crate) fn tidy_breaks(mut breaks: Vec<f64>, scale: f64) -> Vec<f64> {
    let eps = 1e-12 * scale.abs().max(1.0);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(breaks.len());
    for s in breaks {
        match out.last() {
            Some(&prev) if s - prev <= eps => {}
            _ => out.push(s),
        }
    }
    out
}

/// Compensator density `sum_y H(s, x, y) nu_k[x][y]`.
fn compensator_density<H: Integrand + ?Sized>(model: &Model, k: usize, h: &H, s: At, x: usize) -> f64 {
    model
        .row(k, x)
        .iter()
        .enumerate()
        .filter(|(_, &rate)| rate > 0.0)
        .map(|(y, &rate)| h.eval(s, x, y) * rate)
        .sum()
}

/// `int_a^b sum_y H nu ds` over one piece of constant state and cell.
pub(crate) fn piece_compensator<H: Integrand + ?Sized>(model: &Model, h: &H, a: f64, b: f64, x: usize) -> f64 {
    let mid = 0.5 * (a + b);
    let k = model.cell_at(At::right(mid));
    match h.quadrature() {
        Quadrature::CellConstant => (b - a) * compensator_density(model, k, h, At::right(mid), x),
        Quadrature::Subgrid(_) => {
            let fa = compensator_density(model, k, h, At::right(a), x);
            let fm = compensator_density(model, k, h, At::right(mid), x);
            let fb = compensator_density(model, k, h, At::left(b), x);
            (b - a) / 6.0 * (fa + 4.0 * fm + fb)
        }
    }
}

fn check_window(path: &MarkedPath, lo: f64, hi: f64) -> Result<(), SimulateError> {
    let eps = 1e-12 * path.horizon.abs().max(1.0);
    if !(lo >= path.start_time - eps && hi <= path.horizon + eps && lo <= hi) {
        return Err(ModelError::OutOfRange(format!(
            "window [{lo}, {hi}] not inside [{}, {}]",
            path.start_time, path.horizon
        ))
        .into());
    }
    Ok(())
}

/// Integrals of `H` against `p` and against the compensator over `(lo, hi]`.
pub fn stochastic_integral<H: Integrand + ?Sized>(
    model: &Model,
    path: &MarkedPath,
    h: &H,
    lo: f64,
    hi: f64,
) -> Result<IntegralPair, SimulateError> {
    check_window(path, lo, hi)?;
    let p_part = mc::compensated_sum(
        path.jumps()
            .filter(|&(tn, _, _)| tn > lo && tn <= hi)
            .map(|(tn, from, to)| h.eval(At::left(tn), from, to)),
    );
    let breaks = quadrature_breaks(model, h.quadrature(), lo, hi, &[]);
    let nu_part = mc::compensated_sum(
        path.pieces(&breaks, lo, hi)
            .into_iter()
            .map(|p| piece_compensator(model, h, p.a, p.b, p.state)),
    );
    Ok(IntegralPair::new(p_part, nu_part))
}

/// [`stochastic_integral`] over `(c, horizon]` for every checkpoint `c`,
/// computed in one backward sweep.
pub fn stochastic_integral_profile<H: Integrand + ?Sized>(
    model: &Model,
    path: &MarkedPath,
    h: &H,
    checkpoints: &[f64],
) -> Result<Vec<IntegralPair>, SimulateError> {
    let hi = path.horizon;
    for &c in checkpoints {
        check_window(path, c, hi)?;
    }
    let lo = path.start_time;
    let breaks = quadrature_breaks(model, h.quadrature(), lo, hi, checkpoints);
    let pieces = path.pieces(&breaks, lo, hi);
    let contrib: Vec<f64> = pieces
        .iter()
        .map(|p| piece_compensator(model, h, p.a, p.b, p.state))
        .collect();
    let jumps: Vec<(f64, f64)> = path
        .jumps()
        .map(|(tn, from, to)| (tn, h.eval(At::left(tn), from, to)))
        .collect();

    // suffix sums evaluated at each checkpoint, largest first
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by(|&i, &j| checkpoints[j].partial_cmp(&checkpoints[i]).unwrap());
    let mut out = vec![IntegralPair::default(); checkpoints.len()];
    let mut nu_acc = 0.0;
    let mut p_acc = 0.0;
    let mut piece_idx = pieces.len();
    let mut jump_idx = jumps.len();
    let eps = 1e-12 * hi.abs().max(1.0);
    for i in order {
        let c = checkpoints[i];
        while piece_idx > 0 && pieces[piece_idx - 1].a >= c - eps {
            piece_idx -= 1;
            nu_acc += contrib[piece_idx];
        }
        while jump_idx > 0 && jumps[jump_idx - 1].0 > c {
            jump_idx -= 1;
            p_acc += jumps[jump_idx].1;
        }
        out[i] = IntegralPair::new(p_acc, nu_acc);
    }
    Ok(out)
}

/// Mean and SE of `int int H q(ds dy)` over `[t, T]` across independent paths.
pub fn martingale_mean<H: Integrand + ?Sized>(
    model: &Model,
    h: &H,
    t: f64,
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate, SimulateError> {
    if n_paths < 2 {
        return Err(SimulateError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    check_start(model, t, x)?;
    let samples = mc::collect_paths(n_paths, seed, |stream| {
        let mut rng = stream.rng();
        let path = simulate_unchecked(model, t, x, &mut rng);
        stochastic_integral(model, &path, h, t, path.horizon).map(|pair| pair.q_part)
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_, _>>()?;
    Ok(mc::summarize(&samples))
}

/// CSV dump, one row per jump: `path_id,jump_index,time,from_state,to_state`.
pub fn write_paths_csv<W: Write>(paths: &[MarkedPath], mut out: W) -> io::Result<()> {
    writeln!(out, "path_id,jump_index,time,from_state,to_state")?;
    for (id, path) in paths.iter().enumerate() {
        for (j, (tn, from, to)) in path.jumps().enumerate() {
            writeln!(out, "{id},{j},{},{from},{to}", fmt_float(tn))?;
        }
    }
    Ok(())
}
