mod common;

use common::{kkt_minimizer, random_qp};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstack::qp::{solve_qp, stationarity, QpBuilder, QpOptions, QpStatus, QuadraticProgram};

const EPS: f64 = 1e-6;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Stationarity, primal feasibility and sign-consistent bound multipliers.
fn assert_kkt(qp: &QuadraticProgram, x: &[f64], y: &[f64], z: &[f64]) {
    let (res, scale) = stationarity(qp, x, y, z);
    assert!(res <= EPS + EPS * scale, "stationarity {res} (scale {scale})");
    assert!(qp.eq_residual(x) <= EPS, "equality residual {}", qp.eq_residual(x));
    assert!(qp.bound_violation(x) <= EPS);
    for i in 0..x.len() {
        let to_lower = x[i] - qp.l[i];
        let to_upper = qp.u[i] - x[i];
        if z[i] > 0.0 {
            assert!(
                z[i] * to_upper <= 1e-5,
                "upper slackness at {i}: z={} gap={to_upper}",
                z[i]
            );
        } else if z[i] < 0.0 {
            assert!(
                -z[i] * to_lower <= 1e-5,
                "lower slackness at {i}: z={} gap={to_lower}",
                z[i]
            );
        }
    }
}

#[test]
fn active_lower_bound() {
    let mut b = QpBuilder::new();
    let x = b.add_var("x", 1.0, f64::INFINITY);
    b.add_quad(x, x, 1.0);
    let sol = solve_qp(&b.build().unwrap(), &QpOptions::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.x[0] - 1.0).abs() <= EPS);
}

#[test]
fn feasible_target_is_the_projection() {
    let mut b = QpBuilder::new();
    let target = [1.0, -1.0];
    for (i, c) in target.iter().enumerate() {
        b.add_var(format!("x{i}"), f64::NEG_INFINITY, f64::INFINITY);
        b.add_quad(i, i, 0.5);
        b.add_linear(i, -c);
    }
    b.add_eq(vec![(0, 1.0), (1, 1.0)], 0.0);
    let sol = solve_qp(&b.build().unwrap(), &QpOptions::default()).unwrap();
    assert!(max_diff(&sol.x, &target) <= EPS);
}

#[test]
fn equality_qps_match_kkt_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.gen_range(2..=50);
        let m = rng.gen_range(1..n);
        let q = random_qp(&mut rng, n, m, false);
        let sol = solve_qp(&q.qp, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let expect = kkt_minimizer(&q);
        assert!(max_diff(&sol.x, expect.as_slice()) <= EPS, "n={n} m={m}");
        assert_kkt(&q.qp, &sol.x, &sol.y, &sol.z);
    }
}

#[test]
fn bounded_qps_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let n = rng.gen_range(2..=30);
        let m = rng.gen_range(0..n / 2 + 1);
        let q = random_qp(&mut rng, n, m, true);
        let sol = solve_qp(&q.qp, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_kkt(&q.qp, &sol.x, &sol.y, &sol.z);
    }
}

#[test]
fn contradictory_rows_are_infeasible() {
    let mut b = QpBuilder::new();
    b.add_var("x", 0.0, 1.0);
    b.add_quad(0, 0, 1.0);
    b.add_eq(vec![(0, 1.0)], 2.0);
    let sol = solve_qp(&b.build().unwrap(), &QpOptions::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Infeasible);
}

#[test]
fn solves_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = random_qp(&mut rng, 20, 5, true);
    let a = solve_qp(&q.qp, &QpOptions::default()).unwrap();
    let b = solve_qp(&q.qp, &QpOptions::default()).unwrap();
    assert_eq!(a, b);
}

fn scaled(qp: &QuadraticProgram, k: f64) -> QuadraticProgram {
    let mut s = qp.clone();
    s.p.entries.iter_mut().for_each(|e| e.2 *= k);
    s.c.iter_mut().for_each(|v| *v *= k);
    s
}

/// Projection of `r` onto the feasible set of `qp`.
fn project(qp: &QuadraticProgram, r: &[f64]) -> Vec<f64> {
    let mut p = qp.clone();
    p.p.entries = (0..r.len()).map(|i| (i, i, 1.0)).collect();
    p.c = r.iter().map(|v| -v).collect();
    let sol = solve_qp(&p, &QpOptions::default()).unwrap();
    assert!(sol.is_optimal());
    sol.x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn argmin_invariant_under_objective_scaling(seed in 0u64..1_000_000, k in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=20);
        let m = rng.gen_range(0..n / 2 + 1);
        let q = random_qp(&mut rng, n, m, true);
        let a = solve_qp(&q.qp, &QpOptions::default()).unwrap();
        let b = solve_qp(&scaled(&q.qp, k), &QpOptions::default()).unwrap();
        prop_assert!(a.is_optimal() && b.is_optimal());
        prop_assert!(max_diff(&a.x, &b.x) <= 10.0 * EPS, "diff {}", max_diff(&a.x, &b.x));
    }

    #[test]
    fn no_feasible_probe_beats_the_solution(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=12);
        let m = rng.gen_range(0..n / 2 + 1);
        let q = random_qp(&mut rng, n, m, true);
        let sol = solve_qp(&q.qp, &QpOptions::default()).unwrap();
        let best = q.qp.objective(&sol.x);
        for _ in 0..100 {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let probe = project(&q.qp, &r);
            prop_assert!(q.qp.objective(&probe) >= best - 1e-5 * (1.0 + best.abs()));
        }
    }
}
