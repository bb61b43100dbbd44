//! Physical recursions, cost terms and the feasibility checker.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::centralized::GlobalSolution;
use crate::network::{solve_flow, NodeInjection};
use crate::scenario::{BatteryParams, HvacParams, Scenario, Tariff, TariffKind};
use crate::subproblems::CommunityDecision;

/// Stored energy after one slot.
pub fn battery_step(b_prev: f64, p_c: f64, p_d: f64, params: &BatteryParams, dt: f64) -> f64 {
    b_prev + params.eff_charge * p_c * dt - p_d * dt / params.eff_discharge
}

/// Indoor temperature after one slot:
/// `T_prev - (T_prev - T_out + mode*R*p*dt) / (C*R)`.
pub fn hvac_step(t_prev: f64, t_out: f64, p_ac: f64, params: &HvacParams, dt: f64) -> f64 {
    let cr = params.thermal_capacitance * params.thermal_resistance;
    t_prev - (t_prev - t_out + params.mode * params.thermal_resistance * p_ac * dt) / cr
}

pub fn degradation_cost(p_c: &[f64], p_d: &[f64], alpha: f64, dt: f64) -> f64 {
    alpha
        * p_c
            .iter()
            .zip(p_d)
            .map(|(c, d)| (d * dt).powi(2) + (c * dt).powi(2))
            .sum::<f64>()
}

pub fn discomfort_cost(t_in: &[f64], t_pref: f64, beta: f64) -> f64 {
    beta * t_in.iter().map(|t| (t - t_pref).powi(2)).sum::<f64>()
}

pub fn grid_cost(tariff: &Tariff, p_grid: &[f64], dt: f64) -> f64 {
    match tariff.kind {
        TariffKind::Tou => p_grid
            .iter()
            .zip(&tariff.tou_energy_price)
            .map(|(p, pi)| pi * p * dt)
            .sum(),
        TariffKind::Tpt => {
            let energy: f64 = p_grid.iter().sum::<f64>() * dt;
            let peak = p_grid.iter().copied().fold(0.0, f64::max);
            tariff.tpt_energy_price * energy + tariff.tpt_peak_price * peak
        }
    }
}

/// PV feed-in revenue, B2G revenue and net trading cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RevenueTerms {
    pub pv_revenue: f64,
    pub b2g_revenue: f64,
    pub et_net_cost: f64,
}

pub fn revenue_terms(
    p_feed: &[f64],
    p_b2g: &[f64],
    p_ets: &[f64],
    p_etb: &[f64],
    tariff: &Tariff,
    dt: f64,
) -> RevenueTerms {
    let dot = |a: &[f64], price: &[f64]| -> f64 { a.iter().zip(price).map(|(x, p)| x * p * dt).sum() };
    let et: f64 = p_etb
        .iter()
        .zip(p_ets)
        .zip(&tariff.et_price)
        .map(|((b, s), p)| p * (b - s) * dt)
        .sum();
    RevenueTerms {
        pv_revenue: dot(p_feed, &tariff.feed_in_price),
        b2g_revenue: dot(p_b2g, &tariff.b2g_price),
        et_net_cost: et,
    }
}

// ---------------------------------------------------------------------------
// Feasibility

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Negative,
    DisabledStream,
    BatteryDynamics,
    SocBounds,
    ChargeLimit,
    DischargeLimit,
    HvacDynamics,
    HvacPower,
    Temperature,
    GridLimit,
    PvSplit,
    EtBuyLimit,
    EtSellLimit,
    B2bLimit,
    B2gLimit,
    PowerBalance,
    DischargeSplit,
    MarketBalance,
    Complementarity,
    NetworkFlow,
    BranchActive,
    BranchReactive,
    Voltage,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

/// A constraint that fails by more than the tolerance. `element` is a branch
/// or node index for network kinds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityViolation {
    pub kind: ViolationKind,
    pub community: Option<usize>,
    pub slot: Option<usize>,
    pub element: Option<usize>,
    pub excess: f64,
}

impl fmt::Display for FeasibilityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(i) = self.community {
            write!(f, " community={i}")?;
        }
        if let Some(t) = self.slot {
            write!(f, " slot={t}")?;
        }
        if let Some(e) = self.element {
            write!(f, " element={e}")?;
        }
        write!(f, " excess={:.3e}", self.excess)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("dimension mismatch: {0}")]
pub struct DimensionError(pub String);

struct Report<'a> {
    tol: f64,
    out: &'a mut Vec<FeasibilityViolation>,
}

impl Report<'_> {
    /// Records `kind` if `excess` is above the tolerance.
    fn excess(&mut self, kind: ViolationKind, i: Option<usize>, t: Option<usize>, e: Option<usize>, excess: f64) {
        if excess > self.tol || excess.is_nan() {
            self.out.push(FeasibilityViolation {
                kind,
                community: i,
                slot: t,
                element: e,
                excess,
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn range(&mut self, kind: ViolationKind, i: Option<usize>, t: usize, e: Option<usize>, v: f64, lo: f64, hi: f64) {
        self.excess(kind, i, Some(t), e, (lo - v).max(v - hi).max(0.0));
    }
}

/// Net active withdrawal of a community at its node, kW per slot.
pub fn community_withdrawal(d: &CommunityDecision) -> Vec<f64> {
    let e = &d.exchange;
    (0..e.slots())
        .map(|t| e.grid[t] + e.etb[t] - e.ets[t] - e.b2g[t] - e.feed[t])
        .collect()
}

/// Node injections implied by community decisions plus reactive loads.
pub fn injections(s: &Scenario, decisions: &[CommunityDecision]) -> NodeInjection {
    let mut inj = NodeInjection::zeros(s.feeder.nodes, s.slots());
    for (c, d) in s.communities.iter().zip(decisions) {
        for (t, w) in community_withdrawal(d).into_iter().enumerate() {
            inj.active[c.node][t] += w;
            inj.reactive[c.node][t] += c.series.reactive_load[t];
        }
    }
    inj
}

fn check_dims(s: &Scenario, sol: &GlobalSolution) -> Result<(), DimensionError> {
    let h = s.slots();
    if sol.communities.len() != s.communities.len() {
        return Err(DimensionError(format!(
            "{} community decisions for {} communities",
            sol.communities.len(),
            s.communities.len()
        )));
    }
    for (i, d) in sol.communities.iter().enumerate() {
        let series = [
            ("b2g", &d.exchange.b2g),
            ("ets", &d.exchange.ets),
            ("etb", &d.exchange.etb),
            ("grid", &d.exchange.grid),
            ("feed", &d.exchange.feed),
            ("pv_local", &d.pv_local),
            ("charge", &d.charge),
            ("discharge", &d.discharge),
            ("b2b", &d.b2b),
            ("ac", &d.ac),
            ("indoor_temp", &d.indoor_temp),
            ("soc", &d.soc),
        ];
        for (name, v) in series {
            if v.len() != h {
                return Err(DimensionError(format!(
                    "communities[{i}].{name} has {} slots, expected {h}",
                    v.len()
                )));
            }
        }
        if d.x.len() != h || d.y.len() != h {
            return Err(DimensionError(format!("communities[{i}] direction pattern length")));
        }
    }
    let n = &sol.network;
    let nb = s.feeder.num_branches();
    let ok = n.branch_active.len() == nb
        && n.branch_reactive.len() == nb
        && n.node_voltage.len() == s.feeder.nodes
        && n.branch_active
            .iter()
            .chain(&n.branch_reactive)
            .chain(&n.node_voltage)
            .all(|v| v.len() == h);
    if !ok {
        return Err(DimensionError("network state dimensions".into()));
    }
    Ok(())
}

/// Constraints local to community `i` (device models, supply limits,
/// balance, discharge split, complementarity, stream flags).
pub fn check_community(s: &Scenario, i: usize, d: &CommunityDecision, tol: f64) -> Vec<FeasibilityViolation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    let mut r = Report { tol, out: &mut out };
    let c = &s.communities[i];
    let (b, hv, l, se) = (&c.battery, &c.hvac, &c.limits, &c.series);
    let dt = s.dt();
    let e = &d.exchange;
    let ci = Some(i);
    let mut soc_prev = b.initial_energy;
    let mut temp_prev = hv.initial_indoor_temp;
    for t in 0..s.slots() {
        let nonneg = [
            e.b2g[t],
            e.ets[t],
            e.etb[t],
            e.grid[t],
            e.feed[t],
            d.pv_local[t],
            d.charge[t],
            d.discharge[t],
            d.b2b[t],
        ];
        let neg = nonneg.iter().fold(0.0f64, |m, v| m.max(-v));
        r.excess(Negative, ci, Some(t), None, neg);

        let flags = s.flags;
        let mut disabled = 0.0f64;
        if !flags.b2b {
            disabled = disabled.max(d.b2b[t].abs());
        }
        if !flags.b2g {
            disabled = disabled.max(e.b2g[t].abs());
        }
        if !flags.et {
            disabled = disabled.max(e.ets[t].abs()).max(e.etb[t].abs());
        }
        r.excess(DisabledStream, ci, Some(t), None, disabled);

        let soc = battery_step(soc_prev, d.charge[t], d.discharge[t], b, dt);
        r.excess(BatteryDynamics, ci, Some(t), None, (soc - d.soc[t]).abs());
        r.range(SocBounds, ci, t, None, d.soc[t], b.capacity_lower, b.capacity_upper);
        r.range(ChargeLimit, ci, t, None, d.charge[t], 0.0, b.charge_max);
        r.range(DischargeLimit, ci, t, None, d.discharge[t], 0.0, b.discharge_max);
        soc_prev = d.soc[t];

        let temp = hvac_step(temp_prev, se.outdoor_temp[t], d.ac[t], hv, dt);
        r.excess(HvacDynamics, ci, Some(t), None, (temp - d.indoor_temp[t]).abs());
        r.range(HvacPower, ci, t, None, d.ac[t], hv.power_min[t], hv.power_max[t]);
        r.range(
            Temperature,
            ci,
            t,
            None,
            d.indoor_temp[t],
            hv.temp_min[t],
            hv.temp_max[t],
        );
        temp_prev = d.indoor_temp[t];

        r.range(GridLimit, ci, t, None, e.grid[t], 0.0, l.grid_max);
        r.range(PvSplit, ci, t, None, d.pv_local[t] + e.feed[t], 0.0, se.pv_available[t]);
        r.range(EtBuyLimit, ci, t, None, e.etb[t], 0.0, l.et_buy_max);
        r.range(EtSellLimit, ci, t, None, e.ets[t], 0.0, l.et_sell_max);
        r.range(B2bLimit, ci, t, None, d.b2b[t], 0.0, l.b2b_max[t]);
        r.range(B2gLimit, ci, t, None, e.b2g[t], 0.0, l.b2g_max[t]);

        let supply = e.grid[t] + d.pv_local[t] + e.etb[t] + d.b2b[t];
        let demand = d.charge[t] + se.inflexible_load[t] + d.ac[t];
        r.excess(PowerBalance, ci, Some(t), None, (supply - demand).abs());
        let split = d.b2b[t] + e.b2g[t] + e.ets[t];
        r.excess(DischargeSplit, ci, Some(t), None, (d.discharge[t] - split).abs());

        // Both members of a pair strictly positive, or the recorded
        // direction contradicted.
        let mut comp = d.charge[t].min(d.discharge[t]).max(e.ets[t].min(e.etb[t]));
        let (x, y) = (d.x[t] != 0, d.y[t] != 0);
        comp = comp.max(if x { d.charge[t] } else { d.discharge[t] });
        comp = comp.max(if y { e.etb[t] } else { e.ets[t] });
        r.excess(Complementarity, ci, Some(t), None, comp);
    }
    out
}

/// Every constraint of the system problem that fails by more than `tol`
/// (kW for powers, kWh for energy, °C for temperature, p.u. for voltage).
pub fn check_feasibility(
    s: &Scenario,
    sol: &GlobalSolution,
    tol: f64,
) -> Result<Vec<FeasibilityViolation>, DimensionError> {
    use ViolationKind::*;
    check_dims(s, sol)?;
    let mut out = Vec::new();
    for (i, d) in sol.communities.iter().enumerate() {
        out.extend(check_community(s, i, d, tol));
    }
    let mut r = Report { tol, out: &mut out };
    for t in 0..s.slots() {
        let imbalance: f64 = sol
            .communities
            .iter()
            .map(|d| d.exchange.ets[t] - d.exchange.etb[t])
            .sum();
        r.excess(MarketBalance, None, Some(t), None, imbalance.abs());
    }

    let f = &s.feeder;
    let base = f.s_base_kva;
    let expected = solve_flow(f, &injections(s, &sol.communities));
    let n = &sol.network;
    for (bi, br) in f.branches.iter().enumerate() {
        for t in 0..s.slots() {
            let dp = (n.branch_active[bi][t] - expected.branch_active[bi][t]).abs() * base;
            let dq = (n.branch_reactive[bi][t] - expected.branch_reactive[bi][t]).abs() * base;
            r.excess(NetworkFlow, None, Some(t), Some(bi), dp.max(dq));
            let p = n.branch_active[bi][t] * base;
            r.range(BranchActive, None, t, Some(bi), p, br.p_min * base, br.p_max * base);
            let q = n.branch_reactive[bi][t] * base;
            r.range(BranchReactive, None, t, Some(bi), q, br.q_min * base, br.q_max * base);
        }
    }
    for node in 0..f.nodes {
        for t in 0..s.slots() {
            let dv = (n.node_voltage[node][t] - expected.node_voltage[node][t]).abs();
            r.excess(NetworkFlow, None, Some(t), Some(node), dv);
            r.range(
                Voltage,
                None,
                t,
                Some(node),
                n.node_voltage[node][t],
                f.v_min[node],
                f.v_max[node],
            );
        }
    }
    Ok(out)
}
