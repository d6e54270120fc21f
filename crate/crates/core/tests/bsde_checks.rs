mod common;

use common::*;
use jumpbsde::bsde::{self, ZIntegrand};
use jumpbsde::mc::{self, RngStream};
use jumpbsde::pde::{self, Driver, TimeGrid, ValueFunction};
use jumpbsde::simulate::{self, MarkedPath};

fn paths(m: &jumpbsde::model::Model, n: usize, seed: u64) -> Vec<MarkedPath> {
    (0..n as u64)
        .map(|i| simulate::simulate_path(m, 0.0, (i as usize) % m.n_states(), &mut RngStream::new(seed, i).rng()).unwrap())
        .collect()
}

#[test]
fn residual_identifies_affine_solution_with_second_order() {
    let (m, d, g) = affine_benchmark();
    let ps = paths(&m, 100, 21);
    let worst = |h: f64| {
        let v = pde::solve_kolmogorov(&m, &d, &g, h).unwrap();
        ps.iter().map(|p| bsde::bsde_residual(&m, &d, &g, &v, p).unwrap()).fold(0.0, f64::max)
    };
    let (coarse, fine) = (worst(2e-3), worst(1e-3));
    assert!(fine <= 1e-6, "residual {fine}");
    assert!(coarse / fine >= 3.5, "ratio {}", coarse / fine);
}

#[test]
fn residual_flags_a_wrong_driver() {
    let (m, d, g) = affine_benchmark();
    let v = pde::solve_kolmogorov(&m, &d, &g, 1e-3).unwrap();
    let other = source(&m, &[1.0, 1.0, 1.0]);
    let ps = paths(&m, 20, 22);
    let worst = ps.iter().map(|p| bsde::bsde_residual(&m, &other, &g, &v, p).unwrap()).fold(0.0, f64::max);
    assert!(worst > 1e-2, "{worst}");
}

#[test]
fn defects_are_reported_per_node() {
    let (m, d, g) = affine_benchmark();
    let v = pde::solve_kolmogorov(&m, &d, &g, 1e-2).unwrap();
    let p = simulate::simulate_path(&m, 0.3, 1, &mut RngStream::new(5, 0).rng()).unwrap();
    let defects = bsde::bsde_defects(&m, &d, &g, &v, &p).unwrap();
    assert!(defects.first().unwrap().0 >= 0.3 - 1e-12);
    assert!((defects.last().unwrap().0 - 1.0).abs() < 1e-12);
    assert!(defects.last().unwrap().1.abs() < 1e-12);
    assert!(defects.windows(2).all(|w| w[0].0 < w[1].0));
}

#[test]
fn ito_formula_for_quadratic_in_time() {
    let m = three_state();
    let h = 1e-2;
    let w = [1.0, -2.0, 0.5];
    let grid = TimeGrid::new(1.0, h, &[0.5]).unwrap();
    let v = ValueFunction::from_fn(grid, 3, |s, x| s * s * w[x]);
    for p in paths(&m, 100, 23) {
        let d = bsde::verify_ito(&m, &v, &p).unwrap();
        assert!(d <= 10.0 * h * h, "defect {d}");
    }
}

#[test]
fn ito_formula_for_solver_output() {
    let (m, d, g) = affine_benchmark();
    let h = 5e-3;
    let v = pde::solve_kolmogorov(&m, &d, &g, h).unwrap();
    for p in paths(&m, 50, 24) {
        assert!(bsde::verify_ito(&m, &v, &p).unwrap() <= 10.0 * h * h);
    }
}

#[test]
fn energy_identity_on_two_benchmarks() {
    let m = two_state();
    let unit = source(&m, &[1.0, 1.0]);
    let v = pde::solve_kolmogorov(&m, &unit, &[1.0, 0.0], 1e-3).unwrap();
    for beta in [0.0, 2.0] {
        let e = bsde::energy_identity_gap(&m, &v, &unit, 0.0, 0, beta, 20_000, 31).unwrap();
        assert!(e.gap.within(0.0, 3.0), "beta {beta}: {e:?}");
    }
    let (m, d, g) = affine_benchmark();
    let v = pde::solve_kolmogorov(&m, &d, &g, 1e-3).unwrap();
    for beta in [0.0, 2.0] {
        let e = bsde::energy_identity_gap(&m, &v, &d, 0.0, 2, beta, 20_000, 32).unwrap();
        assert!(e.gap.within(0.0, 3.0), "beta {beta}: {e:?}");
    }
}

#[test]
fn feynman_kac_mean_matches_value() {
    let (m, d, g) = affine_benchmark();
    let v = pde::solve_kolmogorov(&m, &d, &g, 1e-3).unwrap();
    for x in 0..3 {
        let e = bsde::feynman_kac_mean(&m, &d, &g, &v, 0.0, x, 20_000, 40 + x as u64).unwrap();
        assert!(e.within(v.initial()[x], 3.0), "x={x}: {e:?} vs {}", v.initial()[x]);
    }
}

#[test]
fn z_integral_is_a_martingale() {
    let (m, d, g) = affine_benchmark();
    let v = pde::solve_kolmogorov(&m, &d, &g, 1e-2).unwrap();
    let e = simulate::martingale_mean(&m, &ZIntegrand { v: &v }, 0.0, 0, 20_000, 50).unwrap();
    assert!(e.within(0.0, 3.0), "{e:?}");
}

#[test]
fn difference_norm_scales_quadratically() {
    let m = three_state();
    let h = 1e-2;
    let zero = pde::solve_kolmogorov(&m, &Driver::Zero, &[0.0; 3], h).unwrap();
    let v1 = pde::solve_kolmogorov(&m, &Driver::Zero, &[1.0, -0.5, 0.25], h).unwrap();
    let v2 = pde::solve_kolmogorov(&m, &Driver::Zero, &[2.0, -1.0, 0.5], h).unwrap();
    let n1 = bsde::difference_norm(&m, &v1, &zero, 0.0, 0, 2000, 60).unwrap();
    let n2 = bsde::difference_norm(&m, &v2, &zero, 0.0, 0, 2000, 60).unwrap();
    assert!(n1.mean > 0.0);
    assert!((n2.mean / n1.mean - 4.0).abs() <= 1e-9, "{} {}", n1.mean, n2.mean);
    let same = bsde::difference_norm(&m, &v1, &v1, 0.0, 0, 100, 61).unwrap();
    assert_eq!(same.mean, 0.0);
}

#[test]
fn difference_norm_bounded_by_terminal_gap() {
    // |Y1 - Y2| <= sup |g1 - g2| for the linear equation
    let m = two_state();
    let h = 1e-2;
    let v1 = pde::solve_kolmogorov(&m, &Driver::Zero, &[1.0, 0.0], h).unwrap();
    let v2 = pde::solve_kolmogorov(&m, &Driver::Zero, &[1.2, -0.1], h).unwrap();
    let e = bsde::difference_norm(&m, &v1, &v2, 0.0, 1, 1000, 62).unwrap();
    let z_bound = 4.0 * 0.2 * 0.2 * m.lambda_max();
    assert!(e.mean <= 0.2 * 0.2 + z_bound);
}

#[test]
fn feynman_kac_zero_driver_uses_terminal_only() {
    let m = two_state();
    let v = pde::solve_kolmogorov(&m, &Driver::Zero, &[1.0, 0.0], 1e-3).unwrap();
    let e = bsde::feynman_kac_mean(&m, &Driver::Zero, &[1.0, 0.0], &v, 0.0, 0, 10_000, 70).unwrap();
    let direct: Vec<f64> = mc::collect_paths(10_000, 70, |s| {
        let p = simulate::simulate_path(&m, 0.0, 0, &mut s.rng()).unwrap();
        if p.final_state() == 0 { 1.0 } else { 0.0 }
    });
    assert_eq!(e, mc::summarize(&direct));
}
