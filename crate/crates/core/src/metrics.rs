//! Cost breakdowns, optimality gap and value-stream attribution.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{self, AdmmError, AdmmOptions, LatencyModel, RunTrace};
use crate::centralized::{solve_centralized, CentralizedError, GlobalSolution};
use crate::devices::{self, check_community, DimensionError};
use crate::scenario::{Scenario, StreamFlags};
use crate::subproblems::CommunityDecision;

/// Cost terms in AUD. `total = grid + degradation + et − b2g − pv
/// (+ discomfort when it is part of the objective)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub grid_cost: f64,
    pub battery_degradation: f64,
    pub et_net_cost: f64,
    pub b2g_revenue: f64,
    pub pv_revenue: f64,
    pub discomfort_cost: f64,
    pub total: f64,
}

impl CostTerms {
    fn close(mut self, include_discomfort: bool) -> Self {
        self.total = self.grid_cost + self.battery_degradation + self.et_net_cost - self.b2g_revenue - self.pv_revenue;
        if include_discomfort {
            self.total += self.discomfort_cost;
        }
        self
    }

    fn add(self, o: &Self) -> Self {
        Self {
            grid_cost: self.grid_cost + o.grid_cost,
            battery_degradation: self.battery_degradation + o.battery_degradation,
            et_net_cost: self.et_net_cost + o.et_net_cost,
            b2g_revenue: self.b2g_revenue + o.b2g_revenue,
            pv_revenue: self.pv_revenue + o.pv_revenue,
            discomfort_cost: self.discomfort_cost + o.discomfort_cost,
            total: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_community: Vec<CostTerms>,
    pub aggregate: CostTerms,
    pub include_discomfort: bool,
}

impl CostBreakdown {
    /// `scope,grid_cost,...,total` with one row per community and an
    /// `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scope,grid_cost,battery_degradation,et_net_cost,b2g_revenue,pv_revenue,discomfort_cost,total\n",
        );
        let rows = self
            .per_community
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("community_{i}"), c))
            .chain(std::iter::once(("all".to_string(), &self.aggregate)));
        for (scope, c) in rows {
            writeln!(
                out,
                "{scope},{},{},{},{},{},{},{}",
                c.grid_cost,
                c.battery_degradation,
                c.et_net_cost,
                c.b2g_revenue,
                c.pv_revenue,
                c.discomfort_cost,
                c.total
            )
            .unwrap();
        }
        out
    }
}

/// Standalone cost of one community's decision.
pub fn community_terms(s: &Scenario, i: usize, d: &CommunityDecision) -> CostTerms {
    let c = &s.communities[i];
    let dt = s.dt();
    let e = &d.exchange;
    let rev = devices::revenue_terms(&e.feed, &e.b2g, &e.ets, &e.etb, &s.tariff, dt);
    CostTerms {
        grid_cost: devices::grid_cost(&s.tariff, &e.grid, dt),
        battery_degradation: devices::degradation_cost(&d.charge, &d.discharge, c.battery.degradation_coeff, dt),
        et_net_cost: rev.et_net_cost,
        b2g_revenue: rev.b2g_revenue,
        pv_revenue: rev.pv_revenue,
        discomfort_cost: devices::discomfort_cost(&d.indoor_temp, c.hvac.temp_pref, c.hvac.discomfort_coeff),
        total: 0.0,
    }
    .close(s.include_discomfort)
}

/// Recomputes every term from the raw series.
pub fn breakdown_of(s: &Scenario, decisions: &[CommunityDecision]) -> CostBreakdown {
    let per_community: Vec<CostTerms> = decisions
        .iter()
        .enumerate()
        .map(|(i, d)| community_terms(s, i, d))
        .collect();
    let aggregate = per_community
        .iter()
        .fold(CostTerms::default(), |acc, c| acc.add(c))
        .close(s.include_discomfort);
    CostBreakdown {
        per_community,
        aggregate,
        include_discomfort: s.include_discomfort,
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Dimension(#[from] DimensionError),
    #[error("infeasible input: {0}")]
    Infeasible(String),
    #[error("{label}: {source}")]
    Centralized { label: String, source: CentralizedError },
    #[error("{label}: {source}")]
    Admm { label: String, source: AdmmError },
    #[error("{label}: ADMM did not converge in {iterations} iterations")]
    NotConverged { label: String, iterations: usize },
    #[error("benchmark cost is zero")]
    ZeroBenchmark,
}

/// Breakdown of a solution whose community constraints hold within 1e-4.
pub fn cost_breakdown(s: &Scenario, g: &GlobalSolution) -> Result<CostBreakdown, MetricsError> {
    devices::check_feasibility(s, g, f64::INFINITY)?;
    for (i, d) in g.communities.iter().enumerate() {
        if let Some(v) = check_community(s, i, d, 1e-4).first() {
            return Err(MetricsError::Infeasible(v.to_string()));
        }
    }
    Ok(breakdown_of(s, &g.communities))
}

/// `|cost_dist − cost_bench| / |cost_bench|`.
pub fn relative_gap(cost: f64, benchmark: f64) -> Result<f64, MetricsError> {
    if benchmark == 0.0 {
        return Err(MetricsError::ZeroBenchmark);
    }
    Ok((cost - benchmark).abs() / benchmark.abs())
}

pub fn optimality_gap(distributed: &RunTrace, benchmark: &GlobalSolution) -> Result<f64, MetricsError> {
    relative_gap(distributed.solution.total_cost, benchmark.total_cost)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolverChoice {
    Centralized,
    Admm { opts: AdmmOptions, latency: LatencyModel },
}

/// Total cost under `solver`; ADMM runs must converge.
pub fn solve_total(s: &Scenario, solver: &SolverChoice, label: &str) -> Result<GlobalSolution, MetricsError> {
    match solver {
        SolverChoice::Centralized => solve_centralized(s).map_err(|source| MetricsError::Centralized {
            label: label.to_string(),
            source,
        }),
        SolverChoice::Admm { opts, latency } => {
            let tr = admm::run(s, *opts, latency).map_err(|source| MetricsError::Admm {
                label: label.to_string(),
                source,
            })?;
            if !tr.converged {
                return Err(MetricsError::NotConverged {
                    label: label.to_string(),
                    iterations: tr.iterations_used,
                });
            }
            Ok(tr.solution)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    B2b,
    B2g,
    Et,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::B2b, Stream::B2g, Stream::Et];

    pub fn name(self) -> &'static str {
        match self {
            Self::B2b => "B2B",
            Self::B2g => "B2G",
            Self::Et => "ET",
        }
    }

    fn without(self, mut f: StreamFlags) -> StreamFlags {
        match self {
            Self::B2b => f.b2b = false,
            Self::B2g => f.b2g = false,
            Self::Et => f.et = false,
        }
        f
    }

    fn only(self) -> StreamFlags {
        let mut f = StreamFlags::none();
        match self {
            Self::B2b => f.b2b = true,
            Self::B2g => f.b2g = true,
            Self::Et => f.et = true,
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Share of the total reduction from no streams to full stacking.
    #[default]
    StackingReduction,
    /// Relative to the full-stacking cost.
    FullCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub stream: Stream,
    pub cost_full: f64,
    pub cost_without: f64,
    pub cost_none: f64,
    pub contribution_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub rows: Vec<MarginalRow>,
    pub normalization: Normalization,
}

impl MarginalReport {
    pub fn row(&self, s: Stream) -> &MarginalRow {
        self.rows
            .iter()
            .find(|r| r.stream == s)
            .expect("every stream has a row")
    }

    pub fn largest(&self) -> Stream {
        self.rows
            .iter()
            .max_by(|a, b| a.contribution_pct.total_cmp(&b.contribution_pct))
            .expect("three rows")
            .stream
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `stream,cost_full,cost_without,cost_none,contribution_pct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stream,cost_full,cost_without,cost_none,contribution_pct\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.stream.name(),
                r.cost_full,
                r.cost_without,
                r.cost_none,
                r.contribution_pct
            )
            .unwrap();
        }
        out
    }
}

pub fn contribution_pct(cost_full: f64, cost_without: f64, cost_none: f64, norm: Normalization) -> f64 {
    let denom = match norm {
        Normalization::StackingReduction => cost_none - cost_full,
        Normalization::FullCost => cost_full.abs(),
    };
    if denom > 0.0 {
        100.0 * (cost_without - cost_full) / denom
    } else {
        0.0
    }
}

fn solve_flag_sets(
    s: &Scenario,
    solver: &SolverChoice,
    sets: &[(String, StreamFlags)],
) -> Result<Vec<f64>, MetricsError> {
    sets.par_iter()
        .map(|(label, flags)| solve_total(&s.with_flags(*flags), solver, label).map(|g| g.total_cost))
        .collect()
}

/// Full stacking, each stream removed in turn, and no streams at all.
pub fn marginal_contribution(
    s: &Scenario,
    solver: &SolverChoice,
    norm: Normalization,
) -> Result<MarginalReport, MetricsError> {
    let full = StreamFlags::all();
    let mut sets = vec![("full".to_string(), full), ("none".to_string(), StreamFlags::none())];
    for st in Stream::ALL {
        sets.push((format!("without {}", st.name()), st.without(full)));
    }
    let costs = solve_flag_sets(s, solver, &sets)?;
    let (cost_full, cost_none) = (costs[0], costs[1]);
    let rows = Stream::ALL
        .iter()
        .zip(&costs[2..])
        .map(|(&stream, &cost_without)| MarginalRow {
            stream,
            cost_full,
            cost_without,
            cost_none,
            contribution_pct: contribution_pct(cost_full, cost_without, cost_none, norm),
        })
        .collect();
    Ok(MarginalReport {
        rows,
        normalization: norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCosts {
    pub stacking: f64,
    pub b2b_only: f64,
    pub b2g_only: f64,
    pub et_only: f64,
}

impl BaselineCosts {
    pub fn to_csv(&self) -> String {
        format!(
            "case,total_cost\nstacking,{}\nb2b_only,{}\nb2g_only,{}\net_only,{}\n",
            self.stacking, self.b2b_only, self.b2g_only, self.et_only
        )
    }
}

/// Full stacking against each single-stream baseline.
pub fn stream_baselines(s: &Scenario, solver: &SolverChoice) -> Result<BaselineCosts, MetricsError> {
    let mut sets = vec![("stacking".to_string(), StreamFlags::all())];
    for st in Stream::ALL {
        sets.push((format!("{} only", st.name()), st.only()));
    }
    let c = solve_flag_sets(s, solver, &sets)?;
    Ok(BaselineCosts {
        stacking: c[0],
        b2b_only: c[1],
        b2g_only: c[2],
        et_only: c[3],
    })
}
