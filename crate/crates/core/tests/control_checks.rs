mod common;

use common::*;
use jumpbsde::control::{self, ControlError, FeedbackPolicy, HistoryControl, RawControl, RawReduction};
use jumpbsde::mc::{self, RngStream};
use jumpbsde::model::{At, Model, StatesSpec};
use jumpbsde::pde;
use jumpbsde::simulate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_raw(model: &Model, m: usize, r_max: f64, rng: &mut ChaCha8Rng) -> RawControl {
    let n = model.n_states();
    let cells = model.cells().n_cells();
    RawControl {
        actions: StatesSpec::Count(m),
        time_cells: None,
        r: (0..cells)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..r_max) }).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        l: (0..cells).map(|_| (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..2.0)).collect()).collect()).collect(),
        g: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn random_policy(cm: &control::ControlModel, rng: &mut ChaCha8Rng) -> FeedbackPolicy {
    let table = (0..cm.cells().n_cells())
        .map(|_| (0..cm.n_states()).map(|_| rng.random_range(0..cm.n_actions())).collect())
        .collect();
    FeedbackPolicy::new(cm, table).unwrap()
}

#[test]
fn hamiltonian_dominance_and_lipschitz_audit() {
    let (m, cm) = admission();
    let (lip, _) = control::lipschitz_bounds(&m, &cm);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let at = At::right(rng.random_range(0.0..1.0));
        let x = rng.random_range(0..3);
        let z1: Vec<f64> = (0..3).map(|y| if y == x { 0.0 } else { rng.random_range(-5.0..5.0) }).collect();
        let z2: Vec<f64> = (0..3).map(|y| if y == x { 0.0 } else { rng.random_range(-5.0..5.0) }).collect();
        let h1 = control::hamiltonian(&m, &cm, at, x, &z1).unwrap();
        let h2 = control::hamiltonian(&m, &cm, at, x, &z2).unwrap();
        for u in 0..cm.n_actions() {
            assert!(h1.value <= control::action_cost(&m, &cm, at, x, &z1, u));
        }
        assert_eq!(h1.chosen, h1.argmin_set[0]);
        assert_eq!(h1.value, control::action_cost(&m, &cm, at, x, &z1, h1.chosen));
        let k = m.cell_at(at);
        let norm: f64 = (0..3).map(|y| m.rate(k, x, y) * (z1[y] - z2[y]).powi(2)).sum::<f64>().sqrt();
        assert!((h1.value - h2.value).abs() <= lip * norm + 1e-12);
    }
}

#[test]
fn unit_density_reduces_to_min_running_cost() {
    let (m, cm) = admission();
    let mut raw = cm.to_raw();
    for cell in raw.r.iter_mut() {
        for mat in cell.iter_mut() {
            for row in mat.iter_mut() {
                row.fill(1.0);
            }
        }
    }
    let flat = control::validate_control(&raw, &m).unwrap();
    let (v, _) = control::solve_hjb(&m, &flat, 1e-3).unwrap();
    // admit costs x, reject costs x + penalty
    let linear = pde::solve_kolmogorov(&m, &source(&m, &[0.0, 1.0, 2.0]), cm.terminal_cost(), 1e-3).unwrap();
    assert!(v.sup_distance(&linear) <= 1e-12);
}

#[test]
fn single_action_is_policy_evaluation() {
    let (m, cm) = admission();
    let mut raw = cm.to_raw();
    raw.actions = StatesSpec::Count(1);
    for cell in raw.r.iter_mut() {
        cell.truncate(1);
    }
    for cell in raw.l.iter_mut() {
        for row in cell.iter_mut() {
            row.truncate(1);
        }
    }
    let one = control::validate_control(&raw, &m).unwrap();
    let (v, policy) = control::solve_hjb(&m, &one, 1e-3).unwrap();
    assert!(policy.table().iter().flatten().all(|&u| u == 0));
    let exact = exact_policy_cost(&m, &one, &policy);
    for x in 0..3 {
        assert!((v.initial()[x] - exact[x]).abs() <= 1e-8);
    }
}

#[test]
fn extracted_policy_is_optimal_among_constants() {
    let (m, cm) = admission();
    let (v, policy) = control::solve_hjb(&m, &cm, 1e-3).unwrap();
    let best = exact_policy_cost(&m, &cm, &policy);
    for x in 0..3 {
        assert!(best[x] - v.initial()[x] <= 1e-4);
    }
    for u in 0..2 {
        let c = exact_policy_cost(&m, &cm, &FeedbackPolicy::constant(&cm, u).unwrap());
        for x in 0..3 {
            assert!(v.initial()[x] <= c[x] + 1e-4);
        }
    }
}

#[test]
fn controlled_jump_count_matches_reweighting() {
    let (m, cm) = admission();
    let policy = FeedbackPolicy::constant(&cm, 1).unwrap();
    let controlled = control::controlled_model(&m, &cm, &policy).unwrap();
    let n = 20_000;
    let direct: Vec<f64> = mc::collect_paths(n, 3, |s| {
        simulate::simulate_path(&controlled, 0.0, 0, &mut s.rng()).unwrap().n_jumps() as f64
    });
    let weighted: Vec<f64> = mc::collect_paths(n, 4, |s| {
        let p = simulate::simulate_path(&m, 0.0, 0, &mut s.rng()).unwrap();
        control::girsanov_weight(&m, &cm, &policy, &p).unwrap().terminal() * p.n_jumps() as f64
    });
    let (a, b) = (mc::summarize(&direct), mc::summarize(&weighted));
    assert!((a.mean - b.mean).abs() <= 3.0 * mc::combined_se(&a, &b), "{a:?} {b:?}");
}

#[test]
fn weight_path_is_nonnegative_and_absorbs_zero() {
    let (m, cm) = admission();
    let policy = FeedbackPolicy::constant(&cm, 1).unwrap();
    for i in 0..200 {
        let p = simulate::simulate_path(&m, 0.0, 1, &mut RngStream::new(5, i).rng()).unwrap();
        let w = control::girsanov_weight(&m, &cm, &policy, &p).unwrap();
        assert_eq!(w.times.len(), w.weights.len());
        assert!(w.weights.iter().all(|v| *v >= 0.0));
        if let Some(i0) = w.weights.iter().position(|v| *v == 0.0) {
            assert!(w.weights[i0..].iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn girsanov_normalization_randomized() {
    let m = three_state();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let cm = control::validate_control(&random_raw(&m, 2, 3.0, &mut rng), &m).unwrap();
        assert!(cm.c_r() <= 3.0);
        let policy = random_policy(&cm, &mut rng);
        let e = control::girsanov_mean(&m, &cm, &policy, 0.0, trial % 3, 20_000, 10 + trial as u64).unwrap();
        assert!(e.within(1.0, 3.0), "trial {trial}: {e:?}");
    }
}

#[test]
fn estimator_agreement_on_two_benchmarks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, cm) = admission();
    let m3 = three_state();
    let cm3 = control::validate_control(&random_raw(&m3, 3, 2.0, &mut rng), &m3).unwrap();
    for (model, ctl) in [(&m, cm.as_ref()), (&m3, &cm3)] {
        for i in 0..3 {
            let policy = random_policy(ctl, &mut rng);
            let a = control::cost_direct(model, ctl, &policy, 0.0, 0, 10_000, 20 + i).unwrap();
            let b = control::cost_reweighted(model, ctl, &policy, 0.0, 0, 10_000, 30 + i).unwrap();
            assert!((a.mean - b.mean).abs() <= 3.0 * mc::combined_se(&a, &b), "{a:?} {b:?}");
            let exact = exact_policy_cost(model, ctl, &policy)[0];
            assert!(a.within(exact, 3.0), "{a:?} vs {exact}");
        }
    }
}

#[test]
fn history_controls_do_not_beat_the_value() {
    let (m, cm) = admission();
    let (v, _) = control::solve_hjb(&m, &cm, 1e-3).unwrap();
    let after_two = HistoryControl(|_cell: usize, _x: usize, h: control::History<'_>| usize::from(h.times.len() >= 2));
    let alternating = HistoryControl(|_cell: usize, x: usize, h: control::History<'_>| (h.marks.len() + x) % 2);
    for (i, c) in [&after_two as &dyn control::AdmissibleControl, &alternating].into_iter().enumerate() {
        let e = control::cost_reweighted(&m, &cm, c, 0.0, 0, 10_000, 40 + i as u64).unwrap();
        assert!(e.mean >= v.initial()[0] - 3.0 * e.se, "{e:?} vs {}", v.initial()[0]);
    }
}

#[test]
fn fundamental_relation_for_extracted_and_random_policies() {
    let (m, cm) = admission();
    let h = 1e-3;
    let (v, policy) = control::solve_hjb(&m, &cm, h).unwrap();
    let fg = control::fundamental_gap(&m, &cm, &policy, &v, 0.0, 0, 5000, 50).unwrap();
    assert!(fg.gap.mean.abs() <= (3.0 * fg.gap.se).max(10.0 * h), "{fg:?}");
    assert!(fg.max_integrand <= 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..5 {
        let p = random_policy(&cm, &mut rng);
        let fg = control::fundamental_gap(&m, &cm, &p, &v, 0.0, 1, 2000, 60 + i).unwrap();
        assert!(fg.max_integrand <= 1e-9);
        assert!(fg.cost.mean >= v.initial()[1] - 3.0 * fg.cost.se);
        assert!((fg.total.mean - v.initial()[1]).abs() <= 3.0 * fg.total.se + 10.0 * h, "{fg:?}");
    }
}

#[test]
fn policy_csv_round_trip() {
    let (_, cm) = admission();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = random_policy(&cm, &mut rng);
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(FeedbackPolicy::read_csv(&text, &cm).unwrap(), p);
    assert!(matches!(FeedbackPolicy::read_csv("cell_index,state,action\n0,0,7\n", &cm), Err(ControlError::BadPolicy(_))));
}

#[test]
fn negative_density_is_rejected() {
    let (m, cm) = admission();
    let mut raw = cm.to_raw();
    raw.r[2][1][0][1] = -0.5;
    let err = control::validate_control(&raw, &m).unwrap_err();
    assert!(matches!(err, ControlError::NegativeDensity { cell: 2, action: 1, from: 0, to: 1, .. }), "{err:?}");
}

/// Controlled rates `lambda^u`, `pi^u` built from a density `r`.
fn controlled_rates(model: &Model, r: &[Vec<Vec<Vec<f64>>>]) -> RawReduction {
    let n = model.n_states();
    let mut lambda_u = Vec::new();
    let mut pi_u = Vec::new();
    for (k, rk) in r.iter().enumerate() {
        let m = rk.len();
        let mut lam = vec![vec![0.0; m]; n];
        let mut pi = vec![vec![vec![0.0; n]; n]; m];
        for u in 0..m {
            for x in 0..n {
                let rates: Vec<f64> =
                    (0..n).map(|y| if y == x { 0.0 } else { rk[u][x][y] * model.rate(k, x, y) }).collect();
                let total: f64 = rates.iter().sum();
                lam[x][u] = total;
                if total > 0.0 {
                    for y in 0..n {
                        pi[u][x][y] = rates[y] / total;
                    }
                }
            }
        }
        lambda_u.push(lam);
        pi_u.push(pi);
    }
    RawReduction { lambda_u, pi_u }
}

#[test]
fn reduction_round_trip() {
    let spec = load_fixture("reduction.json");
    let m = spec.model;
    let n = m.n_states();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let raw = random_raw(&m, 2, 3.0, &mut rng);
        let rates = controlled_rates(&m, &raw.r);
        let red = control::reduce_model(&rates, &m).unwrap();
        for k in 0..m.cells().n_cells() {
            for u in 0..2 {
                for x in 0..n {
                    for y in (0..n).filter(|&y| y != x && m.rate(k, x, y) > 0.0) {
                        assert!((red.r[k][u][x][y] - raw.r[k][u][x][y]).abs() <= 1e-12);
                    }
                }
            }
        }
        assert!(red.c_r.is_finite());
    }
}

#[test]
fn reduction_fixture_and_violations() {
    let spec = load_fixture("reduction.json");
    let m = &spec.model;
    let raw = spec.reduction.clone().unwrap();
    let red = control::reduce_model(&raw, m).unwrap();
    // state 1 of cell 1 has no reference jumps and no controlled jumps
    assert_eq!(red.r[1][0][1][1], 1.0);
    let mut bad = raw.clone();
    bad.lambda_u[1][1][0] = 0.5;
    bad.pi_u[1][0][1] = vec![1.0, 0.0, 0.0];
    assert!(matches!(control::reduce_model(&bad, m), Err(ControlError::NotAbsolutelyContinuous(_))));
    let mut bad = raw.clone();
    bad.pi_u[0][0][2] = vec![1.0, 0.0, 0.0];
    assert!(matches!(control::reduce_model(&bad, m), Err(ControlError::NotAbsolutelyContinuous(_))));
    let mut bad = raw;
    bad.pi_u[0][1][0] = vec![0.0, 0.7, 0.7];
    assert!(matches!(control::reduce_model(&bad, m), Err(ControlError::Invalid(_))));
}
