//! Whole-system benchmark and exhaustive oracles for tiny instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{self, injections};
use crate::metrics::{breakdown_of, CostBreakdown};
use crate::network::{solve_flow, NetworkState};
use crate::qp::{solve_qp, QpBuilder, QpOptions, QpStatus};
use crate::scenario::Scenario;
use crate::subproblems::{
    add_community, add_network_and_market, fix_directions, CommunityDecision, CommunityLayout, DirectionPattern,
    ExchangeKind, ExchangeVector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSolution {
    pub communities: Vec<CommunityDecision>,
    pub network: NetworkState,
    /// System cost recomputed from the decisions.
    pub total_cost: f64,
    pub breakdown: CostBreakdown,
}

impl GlobalSolution {
    /// Assembles a solution from decisions: recomputes the feeder state and
    /// every cost term.
    pub fn from_decisions(s: &Scenario, communities: Vec<CommunityDecision>) -> Self {
        let network = solve_flow(&s.feeder, &injections(s, &communities));
        let breakdown = breakdown_of(s, &communities);
        Self {
            total_cost: breakdown.aggregate.total,
            communities,
            network,
            breakdown,
        }
    }

    pub fn patterns(&self) -> Vec<DirectionPattern> {
        self.communities.iter().map(CommunityDecision::pattern).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }
}

#[derive(Debug, Error)]
pub enum CentralizedError {
    #[error("system QP {stage}: {status:?}")]
    Status { stage: &'static str, status: QpStatus },
    #[error("system QP {stage}: {message}")]
    Qp { stage: &'static str, message: String },
    #[error("instance too large for the oracle: {0}")]
    TooLarge(String),
    #[error("no feasible point found")]
    NoFeasiblePoint,
}

impl CentralizedError {
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Self::Status {
                status: QpStatus::Infeasible,
                ..
            } | Self::NoFeasiblePoint
        )
    }
}

struct SystemSolve {
    decisions: Vec<CommunityDecision>,
    objective: f64,
}

fn solve_system(
    s: &Scenario,
    patterns: Option<&[DirectionPattern]>,
    stage: &'static str,
) -> Result<SystemSolve, CentralizedError> {
    let mut b = QpBuilder::new();
    let layouts: Vec<CommunityLayout> = (0..s.communities.len())
        .map(|i| add_community(&mut b, s, i, patterns.map(|p| &p[i])))
        .collect();
    let col = |i: usize, k: ExchangeKind, t: usize| layouts[i].exchange(k, t);
    add_network_and_market(&mut b, s, &col);
    let qp = b.build().map_err(|e| CentralizedError::Qp {
        stage,
        message: e.to_string(),
    })?;
    let sol = solve_qp(&qp, &QpOptions::default()).map_err(|e| CentralizedError::Qp {
        stage,
        message: e.to_string(),
    })?;
    if !sol.is_optimal() {
        return Err(CentralizedError::Status {
            stage,
            status: sol.status,
        });
    }
    let mut x = sol.x;
    for lay in &layouts {
        lay.clean_epigraph(&mut x);
    }
    let mut decisions: Vec<CommunityDecision> = layouts.iter().map(|l| l.decision(&x)).collect();
    if let Some(p) = patterns {
        for (d, p) in decisions.iter_mut().zip(p) {
            d.x = p.x.clone();
            d.y = p.y.clone();
        }
    }
    Ok(SystemSolve {
        decisions,
        objective: qp.objective(&x),
    })
}

/// Relaxed system solve, direction fixing per community, fixed re-solve.
pub fn solve_centralized(s: &Scenario) -> Result<GlobalSolution, CentralizedError> {
    let relaxed = solve_system(s, None, "relaxed")?;
    let patterns: Vec<DirectionPattern> = relaxed
        .decisions
        .iter()
        .map(|d| fix_directions(&d.charge, &d.discharge, &d.exchange.ets, &d.exchange.etb))
        .collect();
    solve_with_patterns(s, &patterns)
}

/// System problem with every community's directions fixed.
pub fn solve_with_patterns(s: &Scenario, patterns: &[DirectionPattern]) -> Result<GlobalSolution, CentralizedError> {
    let fixed = solve_system(s, Some(patterns), "fixed")?;
    Ok(GlobalSolution::from_decisions(s, fixed.decisions))
}

// ---------------------------------------------------------------------------
// Oracles

pub const ORACLE_MAX_COMMUNITIES: usize = 2;
pub const ORACLE_MAX_SLOTS: usize = 3;
pub const ORACLE_MAX_LEVELS: usize = 7;
/// Largest number of lattice points the grid search will visit.
pub const GRID_BUDGET: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// Every direction pattern, each solved exactly as a convex QP.
    PatternEnumeration,
    /// Every point of a uniform lattice over the free decisions.
    GridSearch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub objective: f64,
    pub solution: GlobalSolution,
    /// Patterns solved or lattice points visited.
    pub evaluated: u64,
    /// Largest lattice spacing used by the grid search, kW.
    pub spacing: f64,
}

fn check_tiny(s: &Scenario, levels: usize) -> Result<(), CentralizedError> {
    if s.communities.len() > ORACLE_MAX_COMMUNITIES
        || s.slots() > ORACLE_MAX_SLOTS
        || !(2..=ORACLE_MAX_LEVELS).contains(&levels)
    {
        return Err(CentralizedError::TooLarge(format!(
            "{} communities, H={}, levels={levels} (limits {ORACLE_MAX_COMMUNITIES}, {ORACLE_MAX_SLOTS}, 2..={ORACLE_MAX_LEVELS})",
            s.communities.len(),
            s.slots()
        )));
    }
    Ok(())
}

pub fn brute_force_oracle(
    s: &Scenario,
    levels: usize,
    method: OracleMethod,
) -> Result<OracleOutcome, CentralizedError> {
    check_tiny(s, levels)?;
    match method {
        OracleMethod::PatternEnumeration => enumerate_patterns(s),
        OracleMethod::GridSearch => grid_search(s, levels),
    }
}

fn enumerate_patterns(s: &Scenario) -> Result<OracleOutcome, CentralizedError> {
    let n = s.communities.len();
    let h = s.slots();
    let per = 1u64 << (2 * h);
    let total = per.pow(n as u32);
    let patterns_of = |code: u64| -> Vec<DirectionPattern> {
        (0..n)
            .map(|i| DirectionPattern::from_code(h, (code / per.pow(i as u32)) % per))
            .collect()
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(|code| {
            let pats = patterns_of(code);
            let sol = solve_system(s, Some(&pats), "oracle").ok()?;
            Some((sol.objective, pats, sol.decisions))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .ok_or(CentralizedError::NoFeasiblePoint)?;
    Ok(OracleOutcome {
        objective: best.0,
        solution: GlobalSolution::from_decisions(s, best.2),
        evaluated: total,
        spacing: 0.0,
    })
}

/// Free decision of the reduced parametrization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GridVar {
    /// Battery net power, positive when charging.
    Net,
    /// Net trade, positive when selling.
    Trade,
    B2g,
    Feed,
    Ac,
}

struct Axis {
    community: usize,
    slot: usize,
    var: GridVar,
    values: Vec<f64>,
}

fn lattice(lo: f64, hi: f64, levels: usize) -> Vec<f64> {
    if hi - lo <= 0.0 {
        return vec![lo];
    }
    (0..levels)
        .map(|k| lo + (hi - lo) * k as f64 / (levels - 1) as f64)
        .collect()
}

/// Decisions at one lattice point, or `None` when a derived quantity leaves
/// its bounds.
fn grid_point(s: &Scenario, axes: &[Axis], index: u64) -> Option<Vec<CommunityDecision>> {
    let n = s.communities.len();
    let h = s.slots();
    let mut net = vec![vec![0.0; h]; n];
    let mut trade = vec![vec![0.0; h]; n];
    let mut b2g = vec![vec![0.0; h]; n];
    let mut feed = vec![vec![0.0; h]; n];
    let mut ac: Vec<Vec<f64>> = s.communities.iter().map(|c| c.hvac.power_min.clone()).collect();
    let mut rem = index;
    for a in axes {
        let k = (rem % a.values.len() as u64) as usize;
        rem /= a.values.len() as u64;
        let v = a.values[k];
        let target = match a.var {
            GridVar::Net => &mut net,
            GridVar::Trade => &mut trade,
            GridVar::B2g => &mut b2g,
            GridVar::Feed => &mut feed,
            GridVar::Ac => &mut ac,
        };
        target[a.community][a.slot] = v;
    }
    // The last community clears the local market.
    let (others, last) = trade.split_at_mut(n - 1);
    for (t, v) in last[0].iter_mut().enumerate() {
        *v = -others.iter().map(|row| row[t]).sum::<f64>();
    }

    let dt = s.dt();
    let mut out = Vec::with_capacity(n);
    for (i, c) in s.communities.iter().enumerate() {
        let (bat, hv, lim, se) = (&c.battery, &c.hvac, &c.limits, &c.series);
        let mut d = CommunityDecision {
            exchange: ExchangeVector::zeros(h),
            pv_local: vec![0.0; h],
            charge: vec![0.0; h],
            discharge: vec![0.0; h],
            b2b: vec![0.0; h],
            ac: ac[i].clone(),
            indoor_temp: vec![0.0; h],
            soc: vec![0.0; h],
            x: vec![0; h],
            y: vec![0; h],
            objective_value: 0.0,
        };
        let mut soc = bat.initial_energy;
        let mut temp = hv.initial_indoor_temp;
        for t in 0..h {
            let e = trade[i][t];
            let (ets, etb) = (e.max(0.0), (-e).max(0.0));
            if ets > lim.et_sell_max + 1e-9 || etb > lim.et_buy_max + 1e-9 || (!s.flags.et && e != 0.0) {
                return None;
            }
            let (ch, dis) = (net[i][t].max(0.0), (-net[i][t]).max(0.0));
            let b2b = dis - b2g[i][t] - ets;
            if b2b < -1e-9 || b2b > lim.b2b_max[t] + 1e-9 || (!s.flags.b2b && b2b > 1e-9) {
                return None;
            }
            let b2b = b2b.max(0.0);
            let demand = ch + se.inflexible_load[t] + d.ac[t];
            let need = demand - etb - b2b;
            if need < -1e-9 {
                return None;
            }
            let local = (se.pv_available[t] - feed[i][t]).min(need.max(0.0));
            let grid = need.max(0.0) - local;
            if grid > lim.grid_max + 1e-9 {
                return None;
            }
            soc = devices::battery_step(soc, ch, dis, bat, dt);
            temp = devices::hvac_step(temp, se.outdoor_temp[t], d.ac[t], hv, dt);
            if soc < bat.capacity_lower - 1e-9 || soc > bat.capacity_upper + 1e-9 {
                return None;
            }
            if temp < hv.temp_min[t] - 1e-9 || temp > hv.temp_max[t] + 1e-9 {
                return None;
            }
            d.charge[t] = ch;
            d.discharge[t] = dis;
            d.b2b[t] = b2b;
            d.pv_local[t] = local;
            d.soc[t] = soc;
            d.indoor_temp[t] = temp;
            d.x[t] = u8::from(dis > 0.0);
            d.y[t] = u8::from(ets > 0.0);
            d.exchange.b2g[t] = b2g[i][t];
            d.exchange.ets[t] = ets;
            d.exchange.etb[t] = etb;
            d.exchange.grid[t] = grid;
            d.exchange.feed[t] = feed[i][t];
        }
        out.push(d);
    }

    let state = solve_flow(&s.feeder, &injections(s, &out));
    let f = &s.feeder;
    for (bi, br) in f.branches.iter().enumerate() {
        for t in 0..h {
            let p = state.branch_active[bi][t];
            let q = state.branch_reactive[bi][t];
            if p < br.p_min - 1e-12 || p > br.p_max + 1e-12 || q < br.q_min - 1e-12 || q > br.q_max + 1e-12 {
                return None;
            }
        }
    }
    for node in 0..f.nodes {
        for t in 0..h {
            let v = state.node_voltage[node][t];
            if v < f.v_min[node] - 1e-12 || v > f.v_max[node] + 1e-12 {
                return None;
            }
        }
    }
    Some(out)
}

fn grid_search(s: &Scenario, levels: usize) -> Result<OracleOutcome, CentralizedError> {
    let n = s.communities.len();
    let mut axes = Vec::new();
    for (i, c) in s.communities.iter().enumerate() {
        let (bat, hv, lim, se) = (&c.battery, &c.hvac, &c.limits, &c.series);
        for t in 0..s.slots() {
            let mut push = |var, lo: f64, hi: f64| {
                let values = lattice(lo, hi, levels);
                if values.len() > 1 {
                    axes.push(Axis {
                        community: i,
                        slot: t,
                        var,
                        values,
                    });
                }
            };
            push(GridVar::Net, -bat.discharge_max, bat.charge_max);
            if i + 1 < n && s.flags.et {
                push(GridVar::Trade, -lim.et_buy_max, lim.et_sell_max);
            }
            if s.flags.b2g {
                push(GridVar::B2g, 0.0, lim.b2g_max[t].min(bat.discharge_max));
            }
            push(GridVar::Feed, 0.0, se.pv_available[t]);
            push(GridVar::Ac, hv.power_min[t], hv.power_max[t]);
        }
    }
    let total = axes
        .iter()
        .try_fold(1u64, |acc, a| acc.checked_mul(a.values.len() as u64))
        .filter(|&n| n <= GRID_BUDGET)
        .ok_or_else(|| CentralizedError::TooLarge(format!("{} lattice axes at {levels} levels", axes.len())))?;
    let spacing = axes.iter().map(|a| a.values[1] - a.values[0]).fold(0.0, f64::max);

    let best = (0..total)
        .into_par_iter()
        .filter_map(|k| {
            let d = grid_point(s, &axes, k)?;
            let cost = breakdown_of(s, &d).aggregate.total;
            Some((cost, k, d))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or(CentralizedError::NoFeasiblePoint)?;
    Ok(OracleOutcome {
        objective: best.0,
        solution: GlobalSolution::from_decisions(s, best.2),
        evaluated: total,
        spacing,
    })
}
