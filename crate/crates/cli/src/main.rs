use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gridrelief_cli::campaign::execute;
use gridrelief_cli::scenario::{eligible_lines, load_case, solve_nominal, Prepared, Scenario};
use gridrelief_cli::summary::{aggregate, aggregates_text, runs_csv, summarize_dir};
use gridrelief_core::simulator::SimulationConfig;

#[derive(Parser)]
#[command(name = "gridrelief", version, about = "Corrective control campaigns on AC grid cases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Concurrent runs.
    #[arg(long, global = true, env = "GRIDRELIEF_WORKERS", default_value_t = 4)]
    workers: usize,
    /// Overrides the scenario's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the scenario's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the campaign described by a scenario file.
    Run { scenario: PathBuf },
    /// Rebuilds the summary of a finished campaign from its artifacts.
    Summarize { dir: PathBuf },
    /// Lists the lines eligible for overload tests.
    EligibleLines { case: String },
    /// Loads a case and reports its nominal operating point.
    Validate { case: String },
}

/// Failure classes with distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

fn config<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn run(cli: &Cli, scenario: &Path) -> Result<bool, Failure> {
    let (mut sc, base) = config(Scenario::load(scenario).map_err(Into::into))?;
    if let Some(seed) = cli.seed {
        sc.config.rng_seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| sc.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&sc.name));
    let prep = config(Prepared::new(sc, &base).with_context(|| format!("preparing {}", scenario.display())))?;
    if !cli.quiet {
        eprintln!("{}: {} runs on {} workers -> {}", prep.scenario.name, prep.runs.len(), cli.workers, out.display());
    }
    let report = execute(&prep, cli.workers, Some(&out)).map_err(|e| Failure::Run(e.into()))?;
    if !cli.quiet {
        print!("{}", aggregates_text(&report.groups));
        let t = &report.timings;
        println!(
            "sensitivity rebuild: mean {:.1} ms, max {:.1} ms; LP pair: mean {:.1} ms, max {:.1} ms",
            1e3 * t.sensitivity_mean,
            1e3 * t.sensitivity_max,
            1e3 * t.lp_pair_mean,
            1e3 * t.lp_pair_max
        );
        for r in report.runs.iter().filter(|r| !r.converged) {
            println!("not cleared: {} {}", r.id, r.error.as_deref().unwrap_or(""));
        }
    }
    Ok(report.all_converged())
}

fn summarize(cli: &Cli, dir: &Path) -> Result<bool, Failure> {
    let rows = config(summarize_dir(dir).map_err(Into::into))?;
    let groups = aggregate(&rows);
    if !cli.quiet {
        print!("{}", runs_csv(&rows));
        print!("{}", aggregates_text(&groups));
    }
    Ok(rows.iter().all(|r| r.converged))
}

fn eligible(case: &str) -> Result<bool, Failure> {
    let net = config(load_case(case, Path::new(".")).map_err(Into::into))?;
    let cfg = SimulationConfig::default();
    let nominal = config(solve_nominal(&net, cfg.q_limits).map_err(Into::into))?;
    let lines = config(eligible_lines(&net, &nominal, &cfg).map_err(Into::into))?;
    println!("{} eligible lines", lines.len());
    println!("{}", lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "));
    Ok(true)
}

fn validate(case: &str) -> Result<bool, Failure> {
    let net = config(load_case(case, Path::new(".")).map_err(Into::into))?;
    let cfg = SimulationConfig::default();
    let sol = config(solve_nominal(&net, cfg.q_limits).map_err(Into::into))?;
    let v_bar = cfg.params.v_bar;
    let pq_v: Vec<f64> = net.pq_indices().iter().map(|&i| sol.v[i]).collect();
    let v_min = pq_v.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = pq_v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let overloads = net
        .lines()
        .iter()
        .zip(&sol.flows)
        .filter(|(l, f)| l.s_rating.is_some_and(|r| f.s_from() > r))
        .count();
    println!(
        "{} buses ({} PV, {} PQ), {} lines",
        net.buses().len(),
        net.pv_indices().len(),
        net.pq_indices().len(),
        net.lines().len()
    );
    println!(
        "power flow: {} iterations, mismatch {:.2e} p.u., slack injection {:.3} MW",
        sol.iterations, sol.max_mismatch, sol.p0
    );
    println!("PQ voltages in [{v_min:.4}, {v_max:.4}] p.u., band 1 ± {v_bar}");
    println!("lines over their rating: {overloads}");
    let clean = overloads == 0 && v_min >= 1.0 - v_bar && v_max <= 1.0 + v_bar;
    if !clean {
        println!("nominal state violates its limits");
    }
    Ok(clean)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario } => run(&cli, scenario),
        Command::Summarize { dir } => summarize(&cli, dir),
        Command::EligibleLines { case } => eligible(case),
        Command::Validate { case } => validate(case),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
