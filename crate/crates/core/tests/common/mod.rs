//! Shared benchmarks and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use jumpbsde::control::{ControlModel, FeedbackPolicy};
use jumpbsde::model::{validate_model, At, Model, RawModel, StatesSpec};
use jumpbsde::pde::{AffineDriver, Driver, RawAffine};
use jumpbsde::spec::{self, ProblemSpec};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load_fixture(name: &str) -> ProblemSpec {
    spec::load_spec(&fixture(name)).unwrap()
}

pub fn model(n: usize, horizon: f64, cells: Option<Vec<f64>>, nu: Vec<Vec<Vec<f64>>>) -> Model {
    validate_model(&RawModel { states: StatesSpec::Count(n), horizon, time_cells: cells, nu }).unwrap()
}

/// `nu = [[0, 2], [3, 0]]` on `[0, 1]`.
pub fn two_state() -> Model {
    model(2, 1.0, None, vec![vec![vec![0.0, 2.0], vec![3.0, 0.0]]])
}

/// Three states, two rate cells, time-varying everything.
pub fn three_state() -> Model {
    model(
        3,
        1.0,
        Some(vec![0.0, 0.5, 1.0]),
        vec![
            vec![vec![0.0, 0.5, 0.25], vec![0.25, 0.0, 0.5], vec![0.5, 0.25, 0.0]],
            vec![vec![0.0, 0.25, 0.5], vec![0.5, 0.0, 0.25], vec![0.25, 0.5, 0.0]],
        ],
    )
}

/// Affine benchmark on [`three_state`]: driver depending on `y` and `z`.
pub fn affine_benchmark() -> (Model, Driver, Vec<f64>) {
    let m = three_state();
    let raw = RawAffine {
        a: Some(vec![vec![-0.5, 0.25, -0.25]; 2]),
        b: Some(vec![vec![1.0, 0.0, 0.5], vec![0.5, 1.0, 0.0]]),
        c: Some(vec![vec![vec![0.0, 0.5, -0.25], vec![0.25, 0.0, 0.5], vec![-0.5, 0.25, 0.0]]; 2]),
    };
    let d = Driver::Affine(Arc::new(AffineDriver::new(&m, &raw).unwrap()));
    (m, d, vec![1.0, 0.0, 0.5])
}

pub fn source(model: &Model, b: &[f64]) -> Driver {
    Driver::Affine(Arc::new(AffineDriver::source(model, b).unwrap()))
}

/// Model and control of the shipped admission-control problem.
pub fn admission() -> (Model, Arc<ControlModel>) {
    let s = load_fixture("admission.json");
    (s.model, s.control.unwrap())
}

// ---- dense linear algebra for the oracles ----

pub fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()
}

/// `exp(A)` by scaling and squaring with a degree-20 Taylor polynomial.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = mat_mul(&term, &scaled, n);
        for v in term.iter_mut() {
            *v /= k as f64;
        }
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result, n);
    }
    result
}

/// Generator matrix `A[x][y] = nu[x][y]`, `A[x][x] = -lambda(x)` of one cell.
pub fn generator_matrix(rates: &[f64], n: usize) -> Vec<f64> {
    let mut a = rates.to_vec();
    for x in 0..n {
        let lambda: f64 = (0..n).filter(|&y| y != x).map(|y| rates[x * n + y]).sum();
        a[x * n + x] = -lambda;
    }
    a
}

/// `v(t, .)` of the linear equation with zero driver, cell by cell.
pub fn linear_oracle(model: &Model, g: &[f64], t: f64) -> Vec<f64> {
    let n = model.n_states();
    let mut v = g.to_vec();
    for k in (0..model.cells().n_cells()).rev() {
        let (a, b) = model.cells().bounds(k);
        let lo = a.max(t);
        if lo >= b {
            continue;
        }
        let gen: Vec<f64> = generator_matrix(model.cell_matrix(k), n).iter().map(|q| q * (b - lo)).collect();
        v = mat_vec(&expm(&gen, n), &v);
    }
    v
}

/// Exact cost at time 0 of a feedback policy: per cell of the common
/// refinement, `[v; 1] <- exp(dt [[Q_u, l_u], [0, 0]]) [v; 1]`.
pub fn exact_policy_cost(model: &Model, cm: &ControlModel, policy: &FeedbackPolicy) -> Vec<f64> {
    let n = model.n_states();
    let na = n + 1;
    let cells = model.cells().refine(cm.cells());
    let mut v: Vec<f64> = cm.terminal_cost().to_vec();
    v.push(1.0);
    for j in (0..cells.n_cells()).rev() {
        let (a, b) = cells.bounds(j);
        let at = At::right(0.5 * (a + b));
        let (km, kc) = (model.cell_at(at), cm.cell_at(at));
        let mut aug = vec![0.0; na * na];
        for x in 0..n {
            let u = policy.action(kc, x);
            let mut out = 0.0;
            for y in (0..n).filter(|&y| y != x) {
                let rate = cm.r(kc, x, y, u) * model.rate(km, x, y);
                aug[x * na + y] = rate * (b - a);
                out += rate;
            }
            aug[x * na + x] = -out * (b - a);
            aug[x * na + n] = cm.running_cost(kc, x, u) * (b - a);
        }
        v = mat_vec(&expm(&aug, na), &v);
    }
    v.truncate(n);
    v
}

/// Kolmogorov-Smirnov statistic of `samples` against a CDF continuous on
/// the finite line; infinite samples (censored draws) are counted in `n`
/// but only the steps at finite samples are compared.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .map(|(i, &s)| {
            let f = cdf(s);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic two-sided KS critical value at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

pub fn ks_two_sample_critical_1pct(n: usize, m: usize) -> f64 {
    1.6276 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
