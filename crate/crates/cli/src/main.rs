//! `vstack`: run, compare and attribute community battery value stacking.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vstack::admm::{self, AdmmMode, AdmmOptions, LatencyModel, RunTrace};
use vstack::centralized::{solve_centralized, GlobalSolution};
use vstack::metrics::{marginal_contribution, Normalization, SolverChoice};
use vstack::scenario::{load_scenario, Scenario, TariffKind};

#[derive(Parser)]
#[command(
    name = "vstack",
    version,
    about = "Network-aware value stacking of community batteries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario and write solution.json, breakdown.csv and trace.csv.
    Run(RunArgs),
    /// Run sync, sync-latency and async ADMM on one arrival schedule.
    Compare(CompareArgs),
    /// Marginal contribution of each value stream.
    Marginal(MarginalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Centralized,
    Sync,
    Async,
    SyncLatency,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TariffArg {
    Tou,
    Tpt,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Reduction,
    FullCost,
}

#[derive(clap::Args)]
struct AdmmArgs {
    /// ADMM penalty; defaults to the scenario's value or 0.1.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    eps1: f64,
    #[arg(long, default_value_t = 0.01)]
    eps2: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// none | bernoulli:<p> | fixed:<d1,d2,...> | trace:<file>
    #[arg(long, default_value = "none")]
    latency: String,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    solver: SolverArg,
    #[command(flatten)]
    admm: AdmmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    admm: AdmmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct MarginalArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    tariff: TariffArg,
    /// Solve each case with async ADMM instead of the centralized solver.
    #[arg(long)]
    distributed: bool,
    #[command(flatten)]
    admm: AdmmArgs,
    #[arg(long, value_enum, default_value = "reduction")]
    normalization: NormArg,
    #[arg(long)]
    out: PathBuf,
}

impl AdmmArgs {
    fn options(&self, s: &Scenario, mode: AdmmMode) -> AdmmOptions {
        AdmmOptions {
            rho: self.rho.or(s.rho).unwrap_or(admm::DEFAULT_RHO),
            eps1: self.eps1,
            eps2: self.eps2,
            max_iter: self.max_iter,
            mode,
            seed: self.seed,
            ..AdmmOptions::default()
        }
    }

    /// Trace files may be given relative to the scenario's directory.
    fn latency(&self, scenario: &Path) -> Result<LatencyModel> {
        let base = scenario.parent().unwrap_or(Path::new("."));
        let spec = admm::resolve_trace_path(&self.latency, base);
        LatencyModel::parse(&spec).with_context(|| format!("--latency {}", self.latency))
    }
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Marginal(a) => cmd_marginal(&a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("ADMM did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_solution(dir: &Path, g: &GlobalSolution) -> Result<()> {
    write(dir, "solution.json", &g.to_json())?;
    write(dir, "breakdown.csv", &g.breakdown.to_csv())
}

fn cmd_run(a: &RunArgs) -> Result<Outcome> {
    let s = load(&a.scenario)?;
    prepare_out(&a.out)?;
    let mode = match a.solver {
        SolverArg::Centralized => {
            let g = solve_centralized(&s).context("centralized solve")?;
            write_solution(&a.out, &g)?;
            write(
                &a.out,
                "trace.csv",
                &format!(
                    "iter,r_primal,r_dual,objective,n_active\n0,0,0,{},{}\n",
                    g.total_cost,
                    s.communities.len()
                ),
            )?;
            return Ok(Outcome::Done);
        }
        SolverArg::Sync => AdmmMode::Sync,
        SolverArg::Async => AdmmMode::Async,
        SolverArg::SyncLatency => AdmmMode::SyncLatency,
    };
    let tr = admm::run(&s, a.admm.options(&s, mode), &a.admm.latency(&a.scenario)?).context("ADMM")?;
    write_trace(&a.out, &tr)?;
    Ok(if tr.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

fn write_trace(dir: &Path, tr: &RunTrace) -> Result<()> {
    write_solution(dir, &tr.solution)?;
    write(dir, "trace.csv", &tr.to_csv())
}

fn cmd_compare(a: &CompareArgs) -> Result<Outcome> {
    let s = load(&a.scenario)?;
    prepare_out(&a.out)?;
    let lat = a.admm.latency(&a.scenario)?;
    let modes = [AdmmMode::Sync, AdmmMode::SyncLatency, AdmmMode::Async];
    let mut traces = Vec::new();
    for mode in modes {
        traces.push(admm::run(&s, a.admm.options(&s, mode), &lat).with_context(|| format!("{mode:?}"))?);
    }
    let rows = traces.iter().map(|t| t.iterations.len()).max().unwrap_or(0);
    let mut csv = String::from(
        "iter,sync_r_primal,sync_r_dual,sync_latency_r_primal,sync_latency_r_dual,async_r_primal,async_r_dual\n",
    );
    for k in 0..rows {
        csv.push_str(&k.to_string());
        for t in &traces {
            match t.iterations.get(k) {
                Some(r) => csv.push_str(&format!(",{},{}", r.r_primal, r.r_dual)),
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    write(&a.out, "compare.csv", &csv)?;
    let mut summary = String::from("mode,converged,iterations,total_cost\n");
    for t in &traces {
        let name = match t.mode {
            AdmmMode::Sync => "sync",
            AdmmMode::SyncLatency => "sync_latency",
            AdmmMode::Async => "async",
        };
        summary.push_str(&format!(
            "{name},{},{},{}\n",
            t.converged, t.iterations_used, t.solution.total_cost
        ));
    }
    write(&a.out, "compare_summary.csv", &summary)?;
    Ok(Outcome::Done)
}

fn cmd_marginal(a: &MarginalArgs) -> Result<Outcome> {
    let kind = match a.tariff {
        TariffArg::Tou => TariffKind::Tou,
        TariffArg::Tpt => TariffKind::Tpt,
    };
    let s = load(&a.scenario)?.with_tariff_kind(kind);
    prepare_out(&a.out)?;
    let solver = if a.distributed {
        SolverChoice::Admm {
            opts: a.admm.options(&s, AdmmMode::Async),
            latency: a.admm.latency(&a.scenario)?,
        }
    } else {
        SolverChoice::Centralized
    };
    let norm = match a.normalization {
        NormArg::Reduction => Normalization::StackingReduction,
        NormArg::FullCost => Normalization::FullCost,
    };
    let report = match marginal_contribution(&s, &solver, norm) {
        Ok(r) => r,
        Err(vstack::metrics::MetricsError::NotConverged { .. }) => return Ok(Outcome::NotConverged),
        Err(e) => bail!(e),
    };
    write(&a.out, "marginal.csv", &report.to_csv())?;
    write(&a.out, "marginal.json", &report.to_json())?;
    Ok(Outcome::Done)
}
