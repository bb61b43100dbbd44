mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstack::network::{
    load_feeder, network_constraints, read_branch_specs, solve_flow, BranchSpec, FeederModel, FeederSettings,
    NetworkError, NodeInjection,
};

fn ieee33() -> FeederModel {
    load_feeder(&common::fixtures().join("ieee33.csv")).unwrap()
}

fn random_injection(nodes: usize, slots: usize, seed: u64) -> NodeInjection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inj = NodeInjection::zeros(nodes, slots);
    for n in 1..nodes {
        for t in 0..slots {
            inj.active[n][t] = rng.gen_range(-200.0..300.0);
            inj.reactive[n][t] = rng.gen_range(-50.0..150.0);
        }
    }
    inj
}

#[test]
fn ieee33_fixture_shape() {
    let f = ieee33();
    assert_eq!(f.nodes, 33);
    assert_eq!(f.num_branches(), 32);
    assert_eq!(f.parent[0], None);
    assert!((1..33).all(|n| f.parent[n].is_some()));
    let block = network_constraints(&f, 24);
    assert_eq!(block.eq_rows.len(), 3 * 32 * 24);
}

#[test]
fn two_node_block_counts() {
    let spec = BranchSpec {
        from: 0,
        to: 1,
        r_ohm: 0.2,
        x_ohm: 0.1,
        pmax_kw: Some(50.0),
        qmax_kvar: Some(40.0),
    };
    let f = FeederModel::from_branches(vec![spec], &FeederSettings::default()).unwrap();
    let block = network_constraints(&f, 1);
    assert_eq!(block.eq_rows.len(), 3);
    assert_eq!(block.bounds.len(), 3);
}

#[test]
fn self_loop_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loop.csv");
    std::fs::write(
        &p,
        "from,to,r_ohm,x_ohm,pmax_kw,qmax_kvar\n0,1,0.1,0.1,,\n5,5,0.1,0.1,,\n",
    )
    .unwrap();
    assert!(matches!(load_feeder(&p), Err(NetworkError::Cycle { from: 5, to: 5 })));
}

#[test]
fn zero_injection_is_flat() {
    let f = ieee33();
    let st = solve_flow(&f, &NodeInjection::zeros(33, 3));
    assert!(st.branch_active.iter().flatten().all(|&v| v == 0.0));
    assert!(st.node_voltage.iter().flatten().all(|&v| v == f.v_ref));
}

#[test]
fn leaf_draw_loads_its_path_only() {
    let f = ieee33();
    let leaf = 17;
    let mut inj = NodeInjection::zeros(33, 1);
    inj.active[leaf][0] = 10.0;
    let st = solve_flow(&f, &inj);
    let path = f.path_to_root(leaf);
    for (b, br) in f.branches.iter().enumerate() {
        let expect = if path.contains(&br.to) { 0.01 } else { 0.0 };
        assert!((st.branch_active[b][0] - expect).abs() < 1e-15, "branch {b}");
    }
}

/// Voltage deviations from an explicitly assembled sensitivity matrix: the
/// drop at node j caused by a withdrawal at node k is the resistance and
/// reactance shared by their root paths.
#[test]
fn voltages_match_dense_sensitivity_matrix() {
    let path = common::fixtures().join("ieee33.csv");
    let specs = read_branch_specs(&path).unwrap();
    let f = load_feeder(&path).unwrap();
    let n = 33;
    let z_base = 12.66 * 12.66 * 1000.0 / 1000.0;
    let mut parent = vec![None; n];
    let mut r_in = vec![0.0; n];
    let mut x_in = vec![0.0; n];
    for s in &specs {
        parent[s.to] = Some(s.from);
        r_in[s.to] = s.r_ohm / z_base;
        x_in[s.to] = s.x_ohm / z_base;
    }
    let ancestors = |mut j: usize| {
        let mut set = vec![false; n];
        while let Some(p) = parent[j] {
            set[j] = true;
            j = p;
        }
        set
    };
    let anc: Vec<Vec<bool>> = (0..n).map(ancestors).collect();
    let mut m = DMatrix::<f64>::zeros(n, 2 * n);
    for j in 0..n {
        for k in 0..n {
            for b in 0..n {
                if anc[j][b] && anc[k][b] {
                    m[(j, k)] -= r_in[b];
                    m[(j, n + k)] -= x_in[b];
                }
            }
        }
    }
    for seed in 0..5 {
        let inj = random_injection(n, 4, seed);
        let st = solve_flow(&f, &inj);
        for t in 0..4 {
            let w = DVector::from_fn(2 * n, |r, _| {
                if r < n {
                    inj.active[r][t] / 1000.0
                } else {
                    inj.reactive[r - n][t] / 1000.0
                }
            });
            let dv = &m * w;
            for j in 0..n {
                let got = st.node_voltage[j][t] - f.v_ref;
                assert!((got - dv[j]).abs() <= 1e-10, "node {j}: {got} vs {}", dv[j]);
            }
        }
    }
}

#[test]
fn constraints_agree_with_flow_on_33_bus() {
    let f = ieee33();
    let block = network_constraints(&f, 24);
    for seed in 0..3 {
        let inj = random_injection(33, 24, seed);
        let st = solve_flow(&f, &inj);
        let x = block.point(&f, &st, &inj);
        assert!(block.max_eq_residual(&x) <= 1e-10);
    }
}

proptest! {
    #[test]
    fn voltage_drop_is_linear(seed in 0u64..1_000_000, alpha in -3.0f64..3.0) {
        let f = ieee33();
        let inj = random_injection(33, 2, seed);
        let a = solve_flow(&f, &inj);
        let b = solve_flow(&f, &inj.scaled(alpha));
        for j in 0..33 {
            for t in 0..2 {
                let lhs = b.node_voltage[j][t] - f.v_ref;
                let rhs = alpha * (a.node_voltage[j][t] - f.v_ref);
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn root_branch_carries_total_withdrawal(seed in 0u64..1_000_000) {
        let f = ieee33();
        let inj = random_injection(33, 3, seed);
        let st = solve_flow(&f, &inj);
        for t in 0..3 {
            let total: f64 = (0..33).map(|j| inj.active[j][t]).sum::<f64>() / f.s_base_kva;
            let root: f64 = f.children[0].iter().map(|&b| st.branch_active[b][t]).sum();
            prop_assert!((total - root).abs() <= 1e-12);
        }
    }

    #[test]
    fn constraints_hold_at_any_flow(seed in 0u64..1_000_000) {
        let f = ieee33();
        let block = network_constraints(&f, 2);
        let inj = random_injection(33, 2, seed);
        let x = block.point(&f, &solve_flow(&f, &inj), &inj);
        prop_assert!(block.max_eq_residual(&x) <= 1e-10);
    }
}
