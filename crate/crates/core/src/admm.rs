//! Synchronous and asynchronous ADMM over a simulated communication layer.
//!
//! Each iteration the communities that receive the broadcast re-solve their
//! sub-problems, the operator solves its sub-problem over every auxiliary
//! copy, and the duals move by `ρ (p̃ − p_ex)`. Message arrival is decided
//! by a [`LatencyModel`] materialized up front from one seeded generator, so
//! every mode replays the same arrivals.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::GlobalSolution;
use crate::metrics::breakdown_of;
use crate::qp::QpOptions;
use crate::scenario::Scenario;
use crate::subproblems::{
    community_builder, fix_directions, solve_community, solve_community_qp, solve_operator, CommunityDecision,
    DirectionPattern, ExchangeKind, SubproblemError,
};

pub const DEFAULT_RHO: f64 = 0.1;
pub const DEFAULT_TRACE_WINDOW: usize = 10;
/// Net trade positions below this (kW) are treated as zero when clearing the market.
const REPAIR_NOISE_KW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmMode {
    /// Every community reports every iteration.
    Sync,
    /// Delayed communities count as reporting the zero vector.
    SyncLatency,
    /// Delayed communities keep their last reported vector.
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmInit {
    /// `p̃` and the operator's view start at the standalone solutions.
    Standalone,
    /// Everything starts at zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions {
    pub rho: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub max_iter: usize,
    pub mode: AdmmMode,
    /// Seeds the arrival schedule when the latency model has no seed.
    pub seed: u64,
    pub init: AdmmInit,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            eps1: 0.01,
            eps2: 0.01,
            max_iter: 500,
            mode: AdmmMode::Async,
            seed: 0,
            init: AdmmInit::Standalone,
        }
    }
}

impl AdmmOptions {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            rho: s.rho.unwrap_or(DEFAULT_RHO),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), AdmmError> {
        if !(self.rho > 0.0) || !(self.eps1 > 0.0) || !(self.eps2 > 0.0) {
            return Err(AdmmError::Options(format!(
                "rho, eps1 and eps2 must be positive (got {}, {}, {})",
                self.rho, self.eps1, self.eps2
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Debug, Clone, PartialEq)]
pub enum LatencyKind {
    None,
    /// Each community's message is delayed independently with this probability.
    Bernoulli(f64),
    /// Community `i` reports on iterations `k` with `k mod (d_i + 1) = 0`.
    FixedDelay(Vec<usize>),
    /// Explicit arrivals, replayed cyclically: entry `k` lists the
    /// communities reporting on iteration `k mod len`.
    Trace {
        arrivals: Vec<Vec<usize>>,
        window: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub kind: LatencyKind,
    pub seed: Option<u64>,
}

impl LatencyModel {
    pub fn none() -> Self {
        Self {
            kind: LatencyKind::None,
            seed: None,
        }
    }

    pub fn bernoulli(p: f64, seed: u64) -> Self {
        Self {
            kind: LatencyKind::Bernoulli(p),
            seed: Some(seed),
        }
    }

    /// Parses `none`, `bernoulli:<p>`, `fixed:<d1,d2,...>` or
    /// `trace:<file>`.
    pub fn parse(spec: &str) -> Result<Self, AdmmError> {
        let bad = |m: &str| AdmmError::Latency(format!("`{spec}`: {m}"));
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (spec, None),
        };
        let kind = match (head, arg) {
            ("none", None) => LatencyKind::None,
            ("bernoulli", Some(p)) => {
                LatencyKind::Bernoulli(p.trim().parse().map_err(|_| bad("probability is not a number"))?)
            }
            ("fixed", Some(d)) => LatencyKind::FixedDelay(
                d.split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("delays must be nonnegative integers"))?,
            ),
            ("trace", Some(path)) => read_arrival_trace(Path::new(path), DEFAULT_TRACE_WINDOW)?,
            _ => return Err(bad("expected none, bernoulli:<p>, fixed:<d1,...> or trace:<file>")),
        };
        let m = Self { kind, seed: None };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), AdmmError> {
        if let LatencyKind::Bernoulli(p) = self.kind {
            if !(0.0..1.0).contains(&p) {
                return Err(AdmmError::Latency(format!("delay probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Arrival sets for iterations `0..iters`; deterministic in the seed.
    pub fn schedule(&self, communities: usize, iters: usize, seed: u64) -> Result<ArrivalSchedule, AdmmError> {
        self.check()?;
        let all: Vec<usize> = (0..communities).collect();
        let arrivals = match &self.kind {
            LatencyKind::None => vec![all; iters],
            LatencyKind::Bernoulli(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(seed));
                (0..iters)
                    .map(|_| (0..communities).filter(|_| rng.gen::<f64>() >= *p).collect())
                    .collect()
            }
            LatencyKind::FixedDelay(d) => {
                let d = match d.len() {
                    1 => vec![d[0]; communities],
                    n if n == communities => d.clone(),
                    n => {
                        return Err(AdmmError::Latency(format!(
                            "{n} fixed delays for {communities} communities"
                        )))
                    }
                };
                (0..iters)
                    .map(|k| (0..communities).filter(|&i| k % (d[i] + 1) == 0).collect())
                    .collect()
            }
            LatencyKind::Trace { arrivals, window } => {
                validate_trace(arrivals, communities, *window)?;
                (0..iters).map(|k| arrivals[k % arrivals.len()].clone()).collect()
            }
        };
        Ok(ArrivalSchedule { arrivals })
    }
}

impl FromStr for LatencyModel {
    type Err = AdmmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    pub arrivals: Vec<Vec<usize>>,
}

impl ArrivalSchedule {
    /// Writes the schedule as `iter,community_id` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), AdmmError> {
        let io = |e: csv::Error| AdmmError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["iter", "community_id"]).map_err(io)?;
        for (k, a) in self.arrivals.iter().enumerate() {
            for i in a {
                w.write_record([k.to_string(), i.to_string()]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| AdmmError::Io(e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct ArrivalRecord {
    iter: usize,
    community_id: usize,
}

/// Reads an `iter,community_id` file into a cyclic trace.
pub fn read_arrival_trace(path: &Path, window: usize) -> Result<LatencyKind, AdmmError> {
    let err = |m: String| AdmmError::Latency(format!("{}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut arrivals: Vec<Vec<usize>> = Vec::new();
    for rec in rdr.deserialize::<ArrivalRecord>() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if arrivals.len() <= rec.iter {
            arrivals.resize(rec.iter + 1, Vec::new());
        }
        if !arrivals[rec.iter].contains(&rec.community_id) {
            arrivals[rec.iter].push(rec.community_id);
        }
    }
    if arrivals.is_empty() {
        return Err(err("no arrivals".into()));
    }
    for a in &mut arrivals {
        a.sort_unstable();
    }
    Ok(LatencyKind::Trace { arrivals, window })
}

/// Every community must report at least once in every `window` consecutive
/// iterations of the cyclic trace.
fn validate_trace(arrivals: &[Vec<usize>], communities: usize, window: usize) -> Result<(), AdmmError> {
    let len = arrivals.len();
    for a in arrivals {
        if let Some(&i) = a.iter().find(|&&i| i >= communities) {
            return Err(AdmmError::Latency(format!(
                "trace names community {i} of {communities}"
            )));
        }
    }
    for i in 0..communities {
        let hits: Vec<usize> = (0..len).filter(|&k| arrivals[k].contains(&i)).collect();
        let Some(&first) = hits.first() else {
            return Err(AdmmError::Latency(format!("community {i} never reports")));
        };
        let mut gap = first + len - hits[hits.len() - 1];
        for w in hits.windows(2) {
            gap = gap.max(w[1] - w[0]);
        }
        if gap > window {
            return Err(AdmmError::Latency(format!(
                "community {i} is silent for {gap} iterations (window {window})"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coordinator

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("invalid options: {0}")]
    Options(String),
    #[error("latency model: {0}")]
    Latency(String),
    #[error("{0}")]
    Io(String),
    #[error("initialization: {0}")]
    Init(SubproblemError),
    #[error("iteration {iteration}: {source}")]
    Subproblem { iteration: usize, source: SubproblemError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub k: usize,
    /// Operator's view of each community's exchange vector.
    pub p_ex: Vec<Vec<f64>>,
    /// Iteration at which each view was last refreshed.
    pub stamps: Vec<usize>,
    pub p_tilde: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub r_primal: f64,
    pub r_dual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub r_primal: f64,
    pub r_dual: f64,
    /// System cost of the latest community decisions.
    pub objective: f64,
    pub active: Vec<usize>,
    pub wall_time_s: f64,
}

/// Wall time is excluded.
impl PartialEq for IterationRecord {
    fn eq(&self, o: &Self) -> bool {
        self.iter == o.iter
            && self.r_primal.to_bits() == o.r_primal.to_bits()
            && self.r_dual.to_bits() == o.r_dual.to_bits()
            && self.objective.to_bits() == o.objective.to_bits()
            && self.active == o.active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub mode: AdmmMode,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations_used: usize,
    pub solution: GlobalSolution,
    /// Whether the final market-clearing repair succeeded.
    pub repaired: bool,
}

impl RunTrace {
    /// `iter,r_primal,r_dual,objective,n_active`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,r_primal,r_dual,objective,n_active\n");
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iter,
                r.r_primal,
                r.r_dual,
                r.objective,
                r.active.len()
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn final_residuals(&self) -> (f64, f64) {
        self.iterations
            .last()
            .map_or((f64::INFINITY, f64::INFINITY), |r| (r.r_primal, r.r_dual))
    }
}

/// `max_i ‖p̃_i − p_ex,i‖∞` and `ρ max_i ‖p̃_i − p̃_i(prev)‖∞`.
pub fn residuals(p_tilde: &[Vec<f64>], p_ex: &[Vec<f64>], p_tilde_prev: &[Vec<f64>], rho: f64) -> (f64, f64) {
    let maxdiff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    };
    (maxdiff(p_tilde, p_ex), rho * maxdiff(p_tilde, p_tilde_prev))
}

/// Step-wise driver; [`run`] loops it to termination.
pub struct Coordinator<'a> {
    s: &'a Scenario,
    opts: AdmmOptions,
    schedule: ArrivalSchedule,
    state: AdmmState,
    decisions: Vec<CommunityDecision>,
    trace: Vec<IterationRecord>,
    started: Instant,
}

impl<'a> Coordinator<'a> {
    pub fn new(s: &'a Scenario, opts: AdmmOptions, lat: &LatencyModel) -> Result<Self, AdmmError> {
        opts.validate()?;
        let n = s.communities.len();
        let w = 5 * s.slots();
        let latency = match opts.mode {
            AdmmMode::Sync => LatencyModel::none(),
            _ => lat.clone(),
        };
        let schedule = latency.schedule(n, opts.max_iter, opts.seed)?;
        let zeros = vec![vec![0.0; w]; n];
        let decisions: Vec<CommunityDecision> = (0..n)
            .into_par_iter()
            .map(|i| solve_community(s, i, &vec![0.0; w], &vec![0.0; w], 0.0))
            .collect::<Result<_, _>>()
            .map_err(AdmmError::Init)?;
        let start: Vec<Vec<f64>> = match opts.init {
            AdmmInit::Standalone => decisions.iter().map(|d| d.exchange.to_flat()).collect(),
            AdmmInit::Zero => zeros.clone(),
        };
        Ok(Self {
            s,
            opts,
            schedule,
            state: AdmmState {
                k: 0,
                p_ex: start.clone(),
                stamps: vec![0; n],
                p_tilde: start,
                lambda: zeros,
                r_primal: f64::INFINITY,
                r_dual: f64::INFINITY,
            },
            decisions,
            trace: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &AdmmState {
        &self.state
    }

    pub fn schedule(&self) -> &ArrivalSchedule {
        &self.schedule
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    pub fn converged(&self) -> bool {
        self.state.r_primal <= self.opts.eps1 && self.state.r_dual <= self.opts.eps2
    }

    pub fn done(&self) -> bool {
        self.converged() || self.state.k >= self.opts.max_iter
    }

    /// One iteration: community updates, operator update, dual update.
    pub fn step(&mut self) -> Result<&IterationRecord, AdmmError> {
        let s = self.s;
        let k = self.state.k;
        let rho = self.opts.rho;
        let n = s.communities.len();
        let active = self.schedule.arrivals[k % self.schedule.arrivals.len()].clone();
        let fail = |source| AdmmError::Subproblem { iteration: k, source };

        let st = &self.state;
        let updates: Vec<(usize, CommunityDecision)> = active
            .par_iter()
            .map(|&i| solve_community(s, i, &st.lambda[i], &st.p_tilde[i], rho).map(|d| (i, d)))
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        for (i, d) in updates {
            self.state.p_ex[i] = d.exchange.to_flat();
            self.state.stamps[i] = k;
            self.decisions[i] = d;
        }
        if self.opts.mode == AdmmMode::SyncLatency {
            for i in (0..n).filter(|i| !active.contains(i)) {
                self.state.p_ex[i].iter_mut().for_each(|v| *v = 0.0);
            }
        }

        let op = solve_operator(s, &self.state.lambda, &self.state.p_ex, rho).map_err(fail)?;
        for i in 0..n {
            for e in 0..self.state.lambda[i].len() {
                self.state.lambda[i][e] += rho * (op.p_tilde[i][e] - self.state.p_ex[i][e]);
            }
        }
        let (rp, rd) = residuals(&op.p_tilde, &self.state.p_ex, &self.state.p_tilde, rho);
        self.state.p_tilde = op.p_tilde;
        self.state.r_primal = rp;
        self.state.r_dual = rd;
        self.state.k += 1;
        self.trace.push(IterationRecord {
            iter: k,
            r_primal: rp,
            r_dual: rd,
            objective: breakdown_of(s, &self.decisions).aggregate.total,
            active,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        });
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Assembles the final solution. The communities' reported net trade
    /// positions are clipped to their limits, the long side of each slot is
    /// scaled down to the short side, and each community re-solves with its
    /// position fixed, so the local market clears exactly. If any re-solve
    /// fails the last reported decisions are kept.
    pub fn finish(self) -> RunTrace {
        let converged = self.converged();
        let (decisions, repaired) = match repair(self.s, &self.state, &self.decisions, self.opts.rho) {
            Some(d) => (d, true),
            None => (self.decisions, false),
        };
        RunTrace {
            mode: self.opts.mode,
            converged,
            iterations_used: self.state.k,
            iterations: self.trace,
            solution: GlobalSolution::from_decisions(self.s, decisions),
            repaired,
        }
    }
}

fn repair(s: &Scenario, st: &AdmmState, last: &[CommunityDecision], rho: f64) -> Option<Vec<CommunityDecision>> {
    let n = s.communities.len();
    let h = s.slots();
    let mut net: Vec<Vec<f64>> = last
        .iter()
        .map(|d| d.exchange.ets.iter().zip(&d.exchange.etb).map(|(a, b)| a - b).collect())
        .collect();
    for t in 0..h {
        for (row, c) in net.iter_mut().zip(&s.communities) {
            let v = row[t].clamp(-c.limits.et_buy_max, c.limits.et_sell_max);
            row[t] = if v.abs() < REPAIR_NOISE_KW { 0.0 } else { v };
        }
        // Shrink the long side of the market onto the short side.
        let sold: f64 = net.iter().map(|row| row[t].max(0.0)).sum();
        let bought: f64 = net.iter().map(|row| (-row[t]).max(0.0)).sum();
        let traded = sold.min(bought);
        for row in net.iter_mut() {
            let side = if row[t] > 0.0 { sold } else { bought };
            if row[t] != 0.0 {
                row[t] *= traded / side;
            }
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sell: Vec<f64> = net[i].iter().map(|v| v.max(0.0)).collect();
            let buy: Vec<f64> = net[i].iter().map(|v| (-v).max(0.0)).collect();
            let y: Vec<u8> = sell.iter().map(|&v| u8::from(v > 0.0)).collect();
            let fixed = |b: &mut crate::qp::QpBuilder, lay: &crate::subproblems::CommunityLayout| {
                for t in 0..h {
                    b.set_bounds(lay.exchange(ExchangeKind::Ets, t), sell[t], sell[t]);
                    b.set_bounds(lay.exchange(ExchangeKind::Etb, t), buy[t], buy[t]);
                }
            };
            let who = format!("community {i} (repair)");
            let opts = QpOptions::default();
            let solve = |x: Vec<u8>| {
                let pattern = DirectionPattern { x, y: y.clone() };
                let (mut b, lay) = community_builder(s, i, &st.lambda[i], &st.p_tilde[i], rho, Some(&pattern)).ok()?;
                fixed(&mut b, &lay);
                let qp = b.build().ok()?;
                solve_community_qp(&qp, &lay, Some(&pattern), &who, &opts).ok()
            };
            // Selling needs the battery in discharge mode.
            let with_sales = |x: &[u8]| x.iter().zip(&y).map(|(&x, &y)| x.max(y)).collect::<Vec<u8>>();
            solve(with_sales(&last[i].x)).or_else(|| {
                let (mut b, lay) = community_builder(s, i, &st.lambda[i], &st.p_tilde[i], rho, None).ok()?;
                fixed(&mut b, &lay);
                let relaxed = solve_community_qp(&b.build().ok()?, &lay, None, &who, &opts).ok()?;
                let rule = fix_directions(&relaxed.charge, &relaxed.discharge, &sell, &buy).x;
                solve(with_sales(&rule)).or_else(|| solve(y.clone()))
            })
        })
        .collect()
}

/// Runs to convergence or `max_iter`.
pub fn run(s: &Scenario, opts: AdmmOptions, lat: &LatencyModel) -> Result<RunTrace, AdmmError> {
    let mut c = Coordinator::new(s, opts, lat)?;
    while !c.done() {
        c.step()?;
    }
    Ok(c.finish())
}

/// A relative trace file that does not exist as given is looked up in `base`.
pub fn resolve_trace_path(spec: &str, base: &Path) -> String {
    match spec.strip_prefix("trace:") {
        Some(p) if Path::new(p).is_relative() && !Path::new(p).exists() => {
            format!("trace:{}", PathBuf::from(base).join(p).display())
        }
        _ => spec.to_string(),
    }
}
