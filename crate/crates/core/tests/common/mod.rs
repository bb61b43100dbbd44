//! Shared helpers for the integration tests: a seeded generator of small
//! scenarios and an independent recomputation of the system cost.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstack::centralized::GlobalSolution;
use vstack::devices::{degradation_cost, discomfort_cost, grid_cost, revenue_terms};
use vstack::network::{BranchSpec, FeederModel, FeederSettings};
use vstack::scenario::{
    load_scenario, validate, BatteryParams, Community, ExogenousSeries, Horizon, HvacParams, Scenario, StreamFlags,
    SupplyLimits, Tariff, TariffKind,
};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn desk33() -> Scenario {
    load_scenario(&fixtures().join("desk33/desk33.json")).expect("desk33 loads")
}

/// Knobs for [`tiny`].
#[derive(Debug, Clone, Copy)]
pub struct Tiny {
    pub communities: usize,
    pub slots: usize,
    pub kind: TariffKind,
    pub pv: bool,
    pub b2g: bool,
    /// HVAC power free within a range instead of pinned.
    pub hvac_free: bool,
    pub degradation: bool,
    /// Branch limit on the first branch, kW.
    pub branch_limit: Option<f64>,
}

impl Tiny {
    pub fn new(communities: usize, slots: usize) -> Self {
        Self {
            communities,
            slots,
            kind: TariffKind::Tou,
            pv: true,
            b2g: true,
            hvac_free: true,
            degradation: true,
            branch_limit: None,
        }
    }
}

fn chain_feeder(nodes: usize, limit: Option<f64>) -> FeederModel {
    let specs = (1..nodes)
        .map(|to| BranchSpec {
            from: to - 1,
            to,
            r_ohm: 0.3,
            x_ohm: 0.2,
            pmax_kw: if to == 1 { limit } else { None },
            qmax_kvar: None,
        })
        .collect();
    FeederModel::from_branches(specs, &FeederSettings::default()).expect("chain feeder")
}

/// A random small instance on a chain feeder with one community per
/// non-root node. Loads exceed every supply path other than the grid, so
/// the grid keeps every instance feasible.
pub fn tiny(seed: u64, o: Tiny) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = o.slots;
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..=hi);
    let tou: Vec<f64> = (0..h).map(|_| u(0.1, 0.5)).collect();
    let feed_in: Vec<f64> = (0..h).map(|_| u(0.0, 0.08)).collect();
    let b2g_price: Vec<f64> = (0..h).map(|_| u(0.0, 0.3)).collect();
    let tpt_energy = u(0.1, 0.3);
    let peak = u(0.2, 1.5);
    let mut communities = Vec::new();
    for k in 0..o.communities {
        let charge_max = u(5.0, 20.0);
        let discharge_max = u(5.0, 20.0);
        let battery = BatteryParams {
            capacity_upper: 100.0,
            capacity_lower: 10.0,
            charge_max,
            discharge_max,
            eff_charge: u(0.85, 1.0),
            eff_discharge: u(0.85, 1.0),
            initial_energy: u(30.0, 70.0),
            degradation_coeff: if o.degradation { u(1e-4, 1e-2) } else { 0.0 },
        };
        let ac = u(0.0, 3.0);
        let hvac = HvacParams {
            thermal_capacitance: 5.0,
            thermal_resistance: 2.0,
            mode: 1.0,
            power_min: vec![if o.hvac_free { 0.0 } else { ac }; h],
            power_max: vec![if o.hvac_free { 5.0 } else { ac }; h],
            temp_min: vec![10.0; h],
            temp_max: vec![35.0; h],
            temp_pref: 22.0,
            discomfort_coeff: u(0.0, 0.1),
            initial_indoor_temp: u(20.0, 24.0),
        };
        let limits = SupplyLimits {
            grid_max: 200.0,
            et_buy_max: u(2.0, 10.0),
            et_sell_max: u(2.0, 10.0),
            b2b_max: vec![100.0; h],
            b2g_max: (0..h).map(|_| if o.b2g { u(0.0, 10.0) } else { 0.0 }).collect(),
        };
        let series = ExogenousSeries {
            pv_available: (0..h).map(|_| if o.pv { u(0.0, 15.0) } else { 0.0 }).collect(),
            inflexible_load: (0..h).map(|_| u(35.0, 50.0)).collect(),
            outdoor_temp: (0..h).map(|_| u(24.0, 30.0)).collect(),
            reactive_load: (0..h).map(|_| u(0.0, 5.0)).collect(),
        };
        communities.push(Community {
            node: k + 1,
            battery,
            hvac,
            limits,
            series,
        });
    }
    let mut tariff = Tariff {
        kind: o.kind,
        tou_energy_price: tou,
        tpt_energy_price: tpt_energy,
        tpt_peak_price: peak,
        feed_in_price: feed_in,
        b2g_price,
        et_price: Vec::new(),
        et_price_explicit: false,
    };
    tariff.et_price = tariff.mid_market();
    let s = Scenario {
        horizon: Horizon { slots: h, dt: 1.0 },
        communities,
        feeder: chain_feeder(o.communities + 1, o.branch_limit),
        tariff,
        flags: StreamFlags {
            b2g: o.b2g,
            ..StreamFlags::all()
        },
        include_discomfort: true,
        rho: None,
    };
    let v = validate(&s);
    assert!(v.is_empty(), "generated scenario invalid: {v:?}");
    s
}

/// System cost rebuilt term by term from the raw decision series.
pub fn recompute_total(s: &Scenario, g: &GlobalSolution) -> f64 {
    let dt = s.dt();
    g.communities
        .iter()
        .zip(&s.communities)
        .map(|(d, c)| {
            let e = &d.exchange;
            let r = revenue_terms(&e.feed, &e.b2g, &e.ets, &e.etb, &s.tariff, dt);
            let mut total = grid_cost(&s.tariff, &e.grid, dt)
                + degradation_cost(&d.charge, &d.discharge, c.battery.degradation_coeff, dt)
                + r.et_net_cost
                - r.b2g_revenue
                - r.pv_revenue;
            if s.include_discomfort {
                total += discomfort_cost(&d.indoor_temp, c.hvac.temp_pref, c.hvac.discomfort_coeff);
            }
            total
        })
        .sum()
}

/// Breakdown total, reported total and the independent recomputation agree.
pub fn assert_closure(s: &Scenario, g: &GlobalSolution) {
    let direct = recompute_total(s, g);
    let b = &g.breakdown.aggregate;
    assert!(
        (b.total - direct).abs() <= 1e-6,
        "breakdown {} vs recomputed {direct}",
        b.total
    );
    assert!(
        (g.total_cost - direct).abs() <= 1e-6,
        "total {} vs recomputed {direct}",
        g.total_cost
    );
    let mut closed = b.grid_cost + b.battery_degradation + b.et_net_cost - b.b2g_revenue - b.pv_revenue;
    if g.breakdown.include_discomfort {
        closed += b.discomfort_cost;
    }
    assert!((b.total - closed).abs() <= 1e-9, "terms {closed} vs total {}", b.total);
}

/// Random strictly convex QP with `m` independent equality rows and the given
/// box, together with its dense data.
pub struct DenseQp {
    pub qp: vstack::qp::QuadraticProgram,
    pub p: nalgebra::DMatrix<f64>,
    pub c: nalgebra::DVector<f64>,
    pub a: nalgebra::DMatrix<f64>,
    pub b: nalgebra::DVector<f64>,
}

pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, bounded: bool) -> DenseQp {
    use nalgebra::{DMatrix, DVector};
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = g.transpose() * &g + DMatrix::identity(n, n);
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    // An interior point keeps bounded instances feasible.
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
    let b = &a * &x0;
    let mut builder = vstack::qp::QpBuilder::new();
    for i in 0..n {
        let (lo, hi) = if bounded {
            (x0[i] - rng.gen_range(0.1..1.0), x0[i] + rng.gen_range(0.1..1.0))
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        builder.add_var(format!("x{i}"), lo, hi);
        builder.add_linear(i, c[i]);
        builder.add_quad(i, i, 0.5 * p[(i, i)]);
        for j in i + 1..n {
            builder.add_quad(i, j, p[(i, j)]);
        }
    }
    for r in 0..m {
        builder.add_eq((0..n).map(|j| (j, a[(r, j)])).collect(), b[r]);
    }
    DenseQp {
        qp: builder.build().expect("random QP builds"),
        p,
        c,
        a,
        b,
    }
}

/// Minimizer of an equality-constrained QP from its KKT system.
pub fn kkt_minimizer(q: &DenseQp) -> nalgebra::DVector<f64> {
    use nalgebra::{DMatrix, DVector};
    let (n, m) = (q.p.nrows(), q.a.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&q.p);
    k.view_mut((0, n), (n, m)).copy_from(&q.a.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&q.a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&q.c));
    rhs.rows_mut(n, m).copy_from(&q.b);
    let sol = k.lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.rows(0, n).into_owned()
}
