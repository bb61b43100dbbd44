//! Community and operator sub-problems, direction handling and the dual update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{network_constraints, NetworkLayout};
use crate::qp::{solve_qp, QpBuilder, QpError, QpOptions, QpSolution, QpStatus, QuadraticProgram};
use crate::scenario::{Scenario, TariffKind};

/// Components of an exchange vector, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeKind {
    B2g,
    Ets,
    Etb,
    Grid,
    Feed,
}

impl ExchangeKind {
    pub const ALL: [ExchangeKind; 5] = [Self::B2g, Self::Ets, Self::Etb, Self::Grid, Self::Feed];

    /// Sign with which the component enters the community's net withdrawal
    /// from the feeder.
    pub fn withdrawal_sign(self) -> f64 {
        match self {
            Self::Etb | Self::Grid => 1.0,
            Self::B2g | Self::Ets | Self::Feed => -1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Quantities a community shares with the operator, kW per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeVector {
    pub b2g: Vec<f64>,
    pub ets: Vec<f64>,
    pub etb: Vec<f64>,
    pub grid: Vec<f64>,
    pub feed: Vec<f64>,
}

impl ExchangeVector {
    pub fn zeros(slots: usize) -> Self {
        Self::from_flat(&vec![0.0; 5 * slots])
    }

    pub fn slots(&self) -> usize {
        self.grid.len()
    }

    pub fn block(&self, kind: ExchangeKind) -> &[f64] {
        match kind {
            ExchangeKind::B2g => &self.b2g,
            ExchangeKind::Ets => &self.ets,
            ExchangeKind::Etb => &self.etb,
            ExchangeKind::Grid => &self.grid,
            ExchangeKind::Feed => &self.feed,
        }
    }

    /// `[B2G, ETS, ETB, grid, feed]`, each block of length H.
    pub fn to_flat(&self) -> Vec<f64> {
        ExchangeKind::ALL
            .iter()
            .flat_map(|&k| self.block(k).iter().copied())
            .collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len() % 5, 0, "exchange vector length must be a multiple of 5");
        let h = v.len() / 5;
        let blk = |k: usize| v[k * h..(k + 1) * h].to_vec();
        Self {
            b2g: blk(0),
            ets: blk(1),
            etb: blk(2),
            grid: blk(3),
            feed: blk(4),
        }
    }
}

/// Charge/discharge (`x`) and buy/sell (`y`) directions per slot.
/// `x = 1` allows discharging only; `y = 1` allows selling only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectionPattern {
    pub x: Vec<u8>,
    pub y: Vec<u8>,
}

impl DirectionPattern {
    pub fn uniform(slots: usize, x: u8, y: u8) -> Self {
        Self {
            x: vec![x; slots],
            y: vec![y; slots],
        }
    }

    /// Pattern number `code` in `0..4^H`: bit `t` sets x, bit `H+t` sets y.
    pub fn from_code(slots: usize, code: u64) -> Self {
        Self {
            x: (0..slots).map(|t| ((code >> t) & 1) as u8).collect(),
            y: (0..slots).map(|t| ((code >> (slots + t)) & 1) as u8).collect(),
        }
    }
}

/// Threshold separating a genuine direction from a numerical tie.
pub const DIRECTION_TIE_TOL: f64 = 1e-7;

/// `x = 1` iff discharge exceeds charge, `y = 1` iff sales exceed purchases;
/// ties resolve to 0.
pub fn fix_directions(charge: &[f64], discharge: &[f64], ets: &[f64], etb: &[f64]) -> DirectionPattern {
    let pick = |a: &[f64], b: &[f64]| -> Vec<u8> {
        a.iter()
            .zip(b)
            .map(|(a, b)| u8::from(*a > *b + DIRECTION_TIE_TOL))
            .collect()
    };
    DirectionPattern {
        x: pick(discharge, charge),
        y: pick(ets, etb),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityDecision {
    pub exchange: ExchangeVector,
    pub pv_local: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    pub b2b: Vec<f64>,
    pub ac: Vec<f64>,
    pub indoor_temp: Vec<f64>,
    /// Stored energy at the end of each slot.
    pub soc: Vec<f64>,
    pub x: Vec<u8>,
    pub y: Vec<u8>,
    /// Value of the sub-problem objective at this decision.
    pub objective_value: f64,
}

impl CommunityDecision {
    pub fn pattern(&self) -> DirectionPattern {
        DirectionPattern {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SubproblemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{who}: QP {status:?}")]
    Status { who: String, status: QpStatus },
    #[error("{who}: {source}")]
    Qp { who: String, source: QpError },
}

impl SubproblemError {
    fn status(who: impl Into<String>, status: QpStatus) -> Self {
        Self::Status {
            who: who.into(),
            status,
        }
    }

    fn qp(who: impl Into<String>, source: QpError) -> Self {
        Self::Qp {
            who: who.into(),
            source,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Self::Status {
                status: QpStatus::Infeasible,
                ..
            }
        )
    }
}

// ---------------------------------------------------------------------------
// Community model

const GRID: usize = 0;
const PV_LOCAL: usize = 1;
const FEED: usize = 2;
const CURTAIL: usize = 3;
const CHARGE: usize = 4;
const DISCHARGE: usize = 5;
const B2B: usize = 6;
const B2G: usize = 7;
const ETS: usize = 8;
const ETB: usize = 9;
const AC: usize = 10;
const TEMP: usize = 11;
const SOC: usize = 12;
const BLOCKS: usize = 13;

/// Column positions of one community's variables inside a QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommunityLayout {
    pub offset: usize,
    pub slots: usize,
    /// Present under the two-part tariff: epigraph of the peak draw followed
    /// by one slack per slot.
    pub peak: Option<usize>,
}

impl CommunityLayout {
    fn at(&self, block: usize, t: usize) -> usize {
        self.offset + block * self.slots + t
    }

    pub fn exchange(&self, kind: ExchangeKind, t: usize) -> usize {
        let block = match kind {
            ExchangeKind::B2g => B2G,
            ExchangeKind::Ets => ETS,
            ExchangeKind::Etb => ETB,
            ExchangeKind::Grid => GRID,
            ExchangeKind::Feed => FEED,
        };
        self.at(block, t)
    }

    /// Position of entry `k` of the flattened exchange vector.
    pub fn exchange_flat(&self, k: usize) -> usize {
        self.exchange(ExchangeKind::ALL[k / self.slots], k % self.slots)
    }

    pub fn charge(&self, t: usize) -> usize {
        self.at(CHARGE, t)
    }

    pub fn discharge(&self, t: usize) -> usize {
        self.at(DISCHARGE, t)
    }

    pub fn num_vars(&self) -> usize {
        BLOCKS * self.slots + self.peak.map_or(0, |_| 1 + self.slots)
    }

    /// Reads a decision out of a primal vector.
    pub fn decision(&self, x: &[f64]) -> CommunityDecision {
        let h = self.slots;
        let series = |b: usize| (0..h).map(|t| x[self.at(b, t)]).collect::<Vec<_>>();
        let charge = series(CHARGE);
        let discharge = series(DISCHARGE);
        let exchange = ExchangeVector {
            b2g: series(B2G),
            ets: series(ETS),
            etb: series(ETB),
            grid: series(GRID),
            feed: series(FEED),
        };
        let pat = fix_directions(&charge, &discharge, &exchange.ets, &exchange.etb);
        CommunityDecision {
            pv_local: series(PV_LOCAL),
            b2b: series(B2B),
            ac: series(AC),
            indoor_temp: series(TEMP),
            soc: series(SOC),
            charge,
            discharge,
            exchange,
            x: pat.x,
            y: pat.y,
            objective_value: 0.0,
        }
    }

    /// Sets the epigraph variable to the exact peak and adjusts its slacks.
    pub fn clean_epigraph(&self, x: &mut [f64]) {
        if let Some(z) = self.peak {
            let peak = (0..self.slots).map(|t| x[self.at(GRID, t)]).fold(0.0, f64::max);
            x[z] = peak;
            for t in 0..self.slots {
                x[z + 1 + t] = peak - x[self.at(GRID, t)];
            }
        }
    }
}

/// Appends community `i`'s variables, constraints and standalone cost.
/// With a pattern, the binary-controlled bounds are fixed accordingly;
/// without, they are relaxed to the plain boxes.
pub fn add_community(b: &mut QpBuilder, s: &Scenario, i: usize, pattern: Option<&DirectionPattern>) -> CommunityLayout {
    let c = &s.communities[i];
    let h = s.slots();
    let dt = s.dt();
    let (bat, hv, lim, se) = (&c.battery, &c.hvac, &c.limits, &c.series);
    let flags = s.flags;
    let tariff = &s.tariff;
    let offset = b.num_vars();
    let name = |blk: &str, t: usize| format!("c{i}.{blk}[{t}]");

    type Bounds<'b> = Box<dyn Fn(usize) -> (f64, f64) + 'b>;
    let specs: [(&str, Bounds); BLOCKS] = [
        ("grid", Box::new(|_| (0.0, lim.grid_max))),
        ("pv_local", Box::new(|t| (0.0, se.pv_available[t]))),
        ("feed", Box::new(|t| (0.0, se.pv_available[t]))),
        ("curtail", Box::new(|t| (0.0, se.pv_available[t]))),
        ("charge", Box::new(|_| (0.0, bat.charge_max))),
        ("discharge", Box::new(|_| (0.0, bat.discharge_max))),
        ("b2b", Box::new(|t| (0.0, if flags.b2b { lim.b2b_max[t] } else { 0.0 }))),
        ("b2g", Box::new(|t| (0.0, if flags.b2g { lim.b2g_max[t] } else { 0.0 }))),
        ("ets", Box::new(|_| (0.0, if flags.et { lim.et_sell_max } else { 0.0 }))),
        ("etb", Box::new(|_| (0.0, if flags.et { lim.et_buy_max } else { 0.0 }))),
        ("ac", Box::new(|t| (hv.power_min[t], hv.power_max[t]))),
        ("temp", Box::new(|t| (hv.temp_min[t], hv.temp_max[t]))),
        ("soc", Box::new(|_| (bat.capacity_lower, bat.capacity_upper))),
    ];
    for (blk, bounds) in &specs {
        for t in 0..h {
            let (lo, hi) = bounds(t);
            b.add_var(name(blk, t), lo, hi);
        }
    }
    let peak = (tariff.kind == TariffKind::Tpt).then(|| {
        let z = b.add_var(format!("c{i}.peak"), 0.0, f64::INFINITY);
        for t in 0..h {
            b.add_var(name("peak_slack", t), 0.0, f64::INFINITY);
        }
        z
    });
    let lay = CommunityLayout { offset, slots: h, peak };
    let v = |blk: usize, t: usize| lay.at(blk, t);

    if let Some(p) = pattern {
        for t in 0..h {
            let shut = |b: &mut QpBuilder, var: usize| b.set_bounds(var, 0.0, 0.0);
            shut(b, if p.x[t] != 0 { v(CHARGE, t) } else { v(DISCHARGE, t) });
            shut(b, if p.y[t] != 0 { v(ETB, t) } else { v(ETS, t) });
        }
    }

    let decay = 1.0 - 1.0 / (hv.thermal_capacitance * hv.thermal_resistance);
    for t in 0..h {
        let mut soc_row = vec![
            (v(SOC, t), 1.0),
            (v(CHARGE, t), -bat.eff_charge * dt),
            (v(DISCHARGE, t), dt / bat.eff_discharge),
        ];
        let mut soc_rhs = 0.0;
        if t == 0 {
            soc_rhs = bat.initial_energy;
        } else {
            soc_row.push((v(SOC, t - 1), -1.0));
        }
        b.add_eq(soc_row, soc_rhs);

        let mut temp_row = vec![(v(TEMP, t), 1.0), (v(AC, t), hv.mode * dt / hv.thermal_capacitance)];
        let mut temp_rhs = se.outdoor_temp[t] / (hv.thermal_capacitance * hv.thermal_resistance);
        if t == 0 {
            temp_rhs += decay * hv.initial_indoor_temp;
        } else {
            temp_row.push((v(TEMP, t - 1), -decay));
        }
        b.add_eq(temp_row, temp_rhs);

        b.add_eq(
            vec![
                (v(GRID, t), 1.0),
                (v(PV_LOCAL, t), 1.0),
                (v(ETB, t), 1.0),
                (v(B2B, t), 1.0),
                (v(CHARGE, t), -1.0),
                (v(AC, t), -1.0),
            ],
            se.inflexible_load[t],
        );
        b.add_eq(
            vec![
                (v(DISCHARGE, t), 1.0),
                (v(B2B, t), -1.0),
                (v(B2G, t), -1.0),
                (v(ETS, t), -1.0),
            ],
            0.0,
        );
        b.add_eq(
            vec![(v(PV_LOCAL, t), 1.0), (v(FEED, t), 1.0), (v(CURTAIL, t), 1.0)],
            se.pv_available[t],
        );
        if let Some(z) = peak {
            b.add_eq(vec![(z, 1.0), (v(GRID, t), -1.0), (z + 1 + t, -1.0)], 0.0);
        }

        b.add_linear(v(GRID, t), tariff.energy_price(t) * dt);
        let deg = bat.degradation_coeff * dt * dt;
        b.add_quad(v(CHARGE, t), v(CHARGE, t), deg);
        b.add_quad(v(DISCHARGE, t), v(DISCHARGE, t), deg);
        b.add_linear(v(ETB, t), tariff.et_price[t] * dt);
        b.add_linear(v(ETS, t), -tariff.et_price[t] * dt);
        b.add_linear(v(B2G, t), -tariff.b2g_price[t] * dt);
        b.add_linear(v(FEED, t), -tariff.feed_in_price[t] * dt);
        if s.include_discomfort {
            let beta = hv.discomfort_coeff;
            b.add_quad(v(TEMP, t), v(TEMP, t), beta);
            b.add_linear(v(TEMP, t), -2.0 * beta * hv.temp_pref);
            b.add_offset(beta * hv.temp_pref * hv.temp_pref);
        }
    }
    if let Some(z) = peak {
        b.add_linear(z, tariff.tpt_peak_price);
    }
    lay
}

/// Adds `−λᵀ p_ex + (ρ/2)‖p̃ − p_ex‖²` over the community's exchange columns.
fn add_lagrangian(b: &mut QpBuilder, lay: &CommunityLayout, lambda: &[f64], p_tilde: &[f64], rho: f64) {
    for k in 0..lambda.len() {
        let col = lay.exchange_flat(k);
        b.add_quad(col, col, 0.5 * rho);
        b.add_linear(col, -lambda[k] - rho * p_tilde[k]);
        b.add_offset(0.5 * rho * p_tilde[k] * p_tilde[k]);
    }
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<(), SubproblemError> {
    if v.len() != expected {
        return Err(SubproblemError::Dimension(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

/// Community sub-problem: standalone cost plus the augmented-Lagrangian terms.
/// `pattern = None` is the relaxed problem.
pub fn build_community_qp(
    s: &Scenario,
    i: usize,
    lambda: &[f64],
    p_tilde: &[f64],
    rho: f64,
    pattern: Option<&DirectionPattern>,
) -> Result<(QuadraticProgram, CommunityLayout), SubproblemError> {
    let (b, lay) = community_builder(s, i, lambda, p_tilde, rho, pattern)?;
    let qp = b
        .build()
        .map_err(|e| SubproblemError::qp(format!("community {i}"), e))?;
    Ok((qp, lay))
}

/// As [`build_community_qp`], stopping before the QP is finalized so that
/// callers can tighten bounds.
pub fn community_builder(
    s: &Scenario,
    i: usize,
    lambda: &[f64],
    p_tilde: &[f64],
    rho: f64,
    pattern: Option<&DirectionPattern>,
) -> Result<(QpBuilder, CommunityLayout), SubproblemError> {
    let h = s.slots();
    if i >= s.communities.len() {
        return Err(SubproblemError::Dimension(format!("no community {i}")));
    }
    check_len("lambda", lambda, 5 * h)?;
    check_len("p_tilde", p_tilde, 5 * h)?;
    if let Some(p) = pattern {
        if p.x.len() != h || p.y.len() != h {
            return Err(SubproblemError::Dimension("direction pattern length".into()));
        }
    }
    let mut b = QpBuilder::new();
    let lay = add_community(&mut b, s, i, pattern);
    add_lagrangian(&mut b, &lay, lambda, p_tilde, rho);
    Ok((b, lay))
}

/// Solves a community QP and extracts its decision; the recorded directions
/// are those of `pattern` when given.
pub fn solve_community_qp(
    qp: &QuadraticProgram,
    lay: &CommunityLayout,
    pattern: Option<&DirectionPattern>,
    who: &str,
    opts: &QpOptions,
) -> Result<CommunityDecision, SubproblemError> {
    let sol = solve_qp(qp, opts).map_err(|e| SubproblemError::qp(who, e))?;
    if !sol.is_optimal() {
        return Err(SubproblemError::status(who, sol.status));
    }
    let mut x = sol.x;
    lay.clean_epigraph(&mut x);
    let mut d = lay.decision(&x);
    if let Some(p) = pattern {
        d.x = p.x.clone();
        d.y = p.y.clone();
    }
    d.objective_value = qp.objective(&x);
    Ok(d)
}

/// Relax, fix directions, re-solve with the pattern fixed.
pub fn solve_community(
    s: &Scenario,
    i: usize,
    lambda: &[f64],
    p_tilde: &[f64],
    rho: f64,
) -> Result<CommunityDecision, SubproblemError> {
    let opts = QpOptions::default();
    let who = format!("community {i}");
    let (qp, lay) = build_community_qp(s, i, lambda, p_tilde, rho, None)?;
    let relaxed = solve_community_qp(&qp, &lay, None, &who, &opts)?;
    let pattern = relaxed.pattern();
    solve_community_with_pattern(s, i, lambda, p_tilde, rho, &pattern)
}

pub fn solve_community_with_pattern(
    s: &Scenario,
    i: usize,
    lambda: &[f64],
    p_tilde: &[f64],
    rho: f64,
    pattern: &DirectionPattern,
) -> Result<CommunityDecision, SubproblemError> {
    let who = format!("community {i}");
    let (qp, lay) = build_community_qp(s, i, lambda, p_tilde, rho, Some(pattern))?;
    solve_community_qp(&qp, &lay, Some(pattern), &who, &QpOptions::default())
}

// ---------------------------------------------------------------------------
// Operator

/// Appends the feeder block and ties node withdrawals to exchange columns:
/// `s_base·w_j − Σ_i sign_k·e_{i,k}` over communities at node j. Withdrawal
/// columns at other nodes are fixed to zero; reactive ones to the reactive
/// load. Also appends one market-balance row per slot.
pub fn add_network_and_market(
    b: &mut QpBuilder,
    s: &Scenario,
    exchange_col: &dyn Fn(usize, ExchangeKind, usize) -> usize,
) -> NetworkLayout {
    let h = s.slots();
    let f = &s.feeder;
    let block = network_constraints(f, h);
    let lay = block.append_to(b, "net");
    for node in 1..f.nodes {
        let members: Vec<usize> = s.communities_at(node).collect();
        for t in 0..h {
            let q: f64 = members.iter().map(|&i| s.communities[i].series.reactive_load[t]).sum();
            let q_pu = f.kw_to_pu(q);
            b.set_bounds(lay.inj_q(node, t), q_pu, q_pu);
            if members.is_empty() {
                b.set_bounds(lay.inj_p(node, t), 0.0, 0.0);
                continue;
            }
            let mut row = vec![(lay.inj_p(node, t), f.s_base_kva)];
            for &i in &members {
                for k in ExchangeKind::ALL {
                    row.push((exchange_col(i, k, t), -k.withdrawal_sign()));
                }
            }
            b.add_eq(row, 0.0);
        }
    }
    for t in 0..h {
        let mut row = Vec::new();
        for i in 0..s.communities.len() {
            row.push((exchange_col(i, ExchangeKind::Ets, t), 1.0));
            row.push((exchange_col(i, ExchangeKind::Etb, t), -1.0));
        }
        b.add_eq(row, 0.0);
    }
    lay
}

/// Operator sub-problem over the auxiliary copies `p̃_i` and the feeder
/// state. `p̃` columns come first, community by community, in flattened
/// exchange order.
pub fn build_operator_qp(
    s: &Scenario,
    lambda: &[Vec<f64>],
    p_ex: &[Vec<f64>],
    rho: f64,
) -> Result<(QuadraticProgram, NetworkLayout), SubproblemError> {
    let n = s.communities.len();
    let h = s.slots();
    if lambda.len() != n || p_ex.len() != n {
        return Err(SubproblemError::Dimension(format!(
            "operator needs {n} duals and exchanges, got {} and {}",
            lambda.len(),
            p_ex.len()
        )));
    }
    for i in 0..n {
        check_len(&format!("lambda[{i}]"), &lambda[i], 5 * h)?;
        check_len(&format!("p_ex[{i}]"), &p_ex[i], 5 * h)?;
    }
    let mut b = QpBuilder::new();
    for i in 0..n {
        for (k, kind) in ExchangeKind::ALL.iter().enumerate() {
            for t in 0..h {
                let col = b.add_var(format!("pt{i}.{kind:?}[{t}]"), f64::NEG_INFINITY, f64::INFINITY);
                let e = k * h + t;
                b.add_quad(col, col, 0.5 * rho);
                b.add_linear(col, lambda[i][e] - rho * p_ex[i][e]);
                b.add_offset(0.5 * rho * p_ex[i][e] * p_ex[i][e]);
            }
        }
    }
    let col = move |i: usize, k: ExchangeKind, t: usize| (i * 5 + k.index()) * h + t;
    let lay = add_network_and_market(&mut b, s, &col);
    let qp = b.build().map_err(|e| SubproblemError::qp("operator", e))?;
    Ok((qp, lay))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSolution {
    /// Auxiliary copy per community, flattened.
    pub p_tilde: Vec<Vec<f64>>,
    pub layout: NetworkLayout,
    pub qp: QpSolution,
}

pub fn solve_operator(
    s: &Scenario,
    lambda: &[Vec<f64>],
    p_ex: &[Vec<f64>],
    rho: f64,
) -> Result<OperatorSolution, SubproblemError> {
    let (qp, layout) = build_operator_qp(s, lambda, p_ex, rho)?;
    let sol = solve_qp(&qp, &QpOptions::default()).map_err(|e| SubproblemError::qp("operator", e))?;
    if !sol.is_optimal() {
        return Err(SubproblemError::status("operator", sol.status));
    }
    let w = 5 * s.slots();
    let p_tilde = (0..s.communities.len())
        .map(|i| sol.x[i * w..(i + 1) * w].to_vec())
        .collect();
    Ok(OperatorSolution {
        p_tilde,
        layout,
        qp: sol,
    })
}

/// `λ + ρ (p̃ − p_ex)`, elementwise.
pub fn dual_update(lambda: &[f64], p_tilde: &[f64], p_ex: &[f64], rho: f64) -> Vec<f64> {
    assert_eq!(lambda.len(), p_tilde.len(), "dual and auxiliary lengths differ");
    assert_eq!(lambda.len(), p_ex.len(), "dual and exchange lengths differ");
    lambda
        .iter()
        .zip(p_tilde)
        .zip(p_ex)
        .map(|((l, pt), p)| l + rho * (pt - p))
        .collect()
}
