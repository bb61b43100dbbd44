#![allow(clippy::needless_range_loop)]

mod common;

use common::{tiny, Tiny};
use vstack::admm::{read_arrival_trace, run, AdmmMode, AdmmOptions, Coordinator, LatencyKind, LatencyModel, RunTrace};
use vstack::centralized::solve_centralized;
use vstack::devices::check_feasibility;
use vstack::scenario::Scenario;

fn opts(mode: AdmmMode) -> AdmmOptions {
    AdmmOptions {
        mode,
        rho: 0.5,
        max_iter: 300,
        ..AdmmOptions::default()
    }
}

fn small(seed: u64) -> Scenario {
    tiny(seed, Tiny::new(2, 3))
}

#[test]
fn dual_update_identity_every_iteration() {
    let s = small(1);
    let o = opts(AdmmMode::Async);
    let mut c = Coordinator::new(&s, o, &LatencyModel::bernoulli(0.3, 3)).unwrap();
    for _ in 0..25 {
        let before = c.state().lambda.clone();
        c.step().unwrap();
        let st = c.state();
        for i in 0..2 {
            for e in 0..before[i].len() {
                let expect = before[i][e] + o.rho * (st.p_tilde[i][e] - st.p_ex[i][e]);
                assert!((st.lambda[i][e] - expect).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn async_without_latency_is_sync() {
    let s = small(2);
    let a = run(&s, opts(AdmmMode::Sync), &LatencyModel::none()).unwrap();
    let b = run(&s, opts(AdmmMode::Async), &LatencyModel::none()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.solution, b.solution);
}

#[test]
fn sync_ignores_the_latency_model() {
    let s = small(2);
    let a = run(&s, opts(AdmmMode::Sync), &LatencyModel::none()).unwrap();
    let b = run(&s, opts(AdmmMode::Sync), &LatencyModel::bernoulli(0.5, 1)).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn runs_are_deterministic() {
    let s = small(3);
    let lat = LatencyModel::bernoulli(0.3, 11);
    let a = run(&s, opts(AdmmMode::Async), &lat).unwrap();
    let b = run(&s, opts(AdmmMode::Async), &lat).unwrap();
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.solution, b.solution);
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn bernoulli_arrivals_keep_everyone_reporting() {
    let sched = LatencyModel::bernoulli(0.3, 5).schedule(4, 10_000, 0).unwrap();
    let mut last = [0usize; 4];
    let mut gap = 0;
    let mut count = [0usize; 4];
    for (k, a) in sched.arrivals.iter().enumerate() {
        for &i in a {
            gap = gap.max(k - last[i]);
            last[i] = k;
            count[i] += 1;
        }
    }
    for (i, &c) in count.iter().enumerate() {
        let share = c as f64 / 10_000.0;
        assert!((share - 0.7).abs() <= 0.02, "community {i}: {share}");
    }
    assert!(gap < 30, "longest silence {gap}");
    let again = LatencyModel::bernoulli(0.3, 5).schedule(4, 10_000, 99).unwrap();
    assert_eq!(sched, again);
}

#[test]
fn fixed_delays_follow_their_period() {
    let sched = LatencyModel::parse("fixed:0,2").unwrap().schedule(2, 7, 0).unwrap();
    assert_eq!(
        sched.arrivals,
        vec![vec![0, 1], vec![0], vec![0], vec![0, 1], vec![0], vec![0], vec![0, 1]]
    );
}

#[test]
fn bad_latency_specs_are_rejected() {
    for spec in [
        "warp:3",
        "bernoulli:x",
        "bernoulli:1.5",
        "bernoulli:-0.1",
        "fixed:",
        "fixed:1,2,3",
        "trace:/nonexistent.csv",
    ] {
        let res = LatencyModel::parse(spec).and_then(|m| m.schedule(2, 10, 0));
        assert!(res.is_err(), "{spec} accepted");
    }
}

#[test]
fn arrival_trace_round_trip_and_window() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("arrivals.csv");
    let sched = LatencyModel::bernoulli(0.3, 7).schedule(3, 50, 0).unwrap();
    sched.write_csv(&p).unwrap();
    let kind = read_arrival_trace(&p, 10).unwrap();
    let LatencyKind::Trace { arrivals, .. } = kind.clone() else {
        panic!("not a trace")
    };
    assert_eq!(arrivals, sched.arrivals[..arrivals.len()]);
    let m = LatencyModel { kind, seed: None };
    assert_eq!(m.schedule(3, arrivals.len(), 0).unwrap().arrivals, arrivals);

    std::fs::write(&p, "iter,community_id\n0,0\n0,1\n1,0\n2,0\n3,0\n").unwrap();
    let m = LatencyModel {
        kind: read_arrival_trace(&p, 2).unwrap(),
        seed: None,
    };
    assert!(m.schedule(2, 10, 0).is_err());
}

#[test]
fn non_positive_rho_is_rejected() {
    let s = small(1);
    let mut o = opts(AdmmMode::Sync);
    o.rho = 0.0;
    assert!(Coordinator::new(&s, o, &LatencyModel::none()).is_err());
}

fn assert_sound(s: &Scenario, t: &RunTrace, o: &AdmmOptions) {
    if t.converged {
        let (rp, rd) = t.final_residuals();
        assert!(rp <= o.eps1 && rd <= o.eps2, "{rp} {rd}");
    }
    let tol = o.eps1.max(1e-4);
    let v = check_feasibility(s, &t.solution, tol).unwrap();
    assert!(v.is_empty(), "{v:?}");
    common::assert_closure(s, &t.solution);
}

#[test]
fn final_solutions_are_feasible() {
    for seed in 0..4 {
        let s = small(seed);
        for mode in [AdmmMode::Sync, AdmmMode::Async, AdmmMode::SyncLatency] {
            let o = opts(mode);
            let t = run(&s, o, &LatencyModel::bernoulli(0.3, seed)).unwrap();
            assert!(t.repaired, "seed {seed} {mode:?}");
            assert_sound(&s, &t, &o);
        }
    }
}

#[test]
fn single_community_matches_centralized() {
    for seed in 0..3 {
        let s = tiny(seed, Tiny::new(1, 4));
        let o = opts(AdmmMode::Sync);
        let t = run(&s, o, &LatencyModel::none()).unwrap();
        assert!(t.converged);
        let c = solve_centralized(&s).unwrap().total_cost;
        let gap = (t.solution.total_cost - c).abs() / c.abs();
        assert!(gap <= 0.005, "seed {seed}: {} vs {c}", t.solution.total_cost);
    }
}

#[test]
fn two_communities_converge_near_centralized() {
    let s = small(5);
    let o = opts(AdmmMode::Async);
    let t = run(&s, o, &LatencyModel::bernoulli(0.3, 5)).unwrap();
    assert!(t.converged, "{} iterations", t.iterations_used);
    let c = solve_centralized(&s).unwrap().total_cost;
    assert!(t.solution.total_cost >= c - 1e-6);
    assert!(
        (t.solution.total_cost - c) / c.abs() <= 0.01,
        "{} vs {c}",
        t.solution.total_cost
    );
}
