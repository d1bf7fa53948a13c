//! Concurrent execution of a campaign and the artifacts it leaves behind.

use std::path::{Path, PathBuf};

use gridrelief_core::simulator::{simulate, SimError, SimulationFailure, Trajectory};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scenario::{Prepared, RunSpec};
use crate::summary::{aggregate, aggregates_csv, aggregates_text, runs_csv, summarize_trajectory, GroupAggregate, RunMeta, RunSummary};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// Runs every spec of `prep` on `workers` threads and hands each result to
/// `visit`. Results come back in run order regardless of scheduling.
pub fn run_campaign<T, F>(prep: &Prepared, workers: usize, visit: F) -> Result<Vec<T>, CampaignError>
where
    T: Send,
    F: Fn(&RunSpec, Result<Trajectory, SimulationFailure>) -> T + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    Ok(pool.install(|| {
        prep.runs
            .par_iter()
            .map(|spec| visit(spec, simulate(&prep.net, &spec.config)))
            .collect()
    }))
}

/// Wall-clock statistics of the expensive steps (s).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingReport {
    pub sensitivity_builds: usize,
    pub sensitivity_mean: f64,
    pub sensitivity_max: f64,
    /// Controller samples that solved at least one program.
    pub lp_samples: usize,
    pub lp_pair_mean: f64,
    pub lp_pair_max: f64,
}

impl TimingReport {
    pub fn add(&mut self, traj: &Trajectory) {
        let t = &traj.timings;
        let merge = |n: &mut usize, mean: &mut f64, max: &mut f64, xs: &mut dyn Iterator<Item = f64>| {
            for x in xs {
                *mean = (*mean * *n as f64 + x) / (*n as f64 + 1.0);
                *n += 1;
                *max = max.max(x);
            }
        };
        merge(
            &mut self.sensitivity_builds,
            &mut self.sensitivity_mean,
            &mut self.sensitivity_max,
            &mut t.sensitivity.iter().copied(),
        );
        merge(
            &mut self.lp_samples,
            &mut self.lp_pair_mean,
            &mut self.lp_pair_max,
            &mut t.active_lp.iter().zip(&t.voltage_lp).map(|(a, v)| a + v),
        );
    }

    pub fn merge(&mut self, other: &TimingReport) {
        let combine = |n1: usize, m1: f64, n2: usize, m2: f64| {
            if n1 + n2 == 0 {
                0.0
            } else {
                (m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64
            }
        };
        self.sensitivity_mean = combine(self.sensitivity_builds, self.sensitivity_mean, other.sensitivity_builds, other.sensitivity_mean);
        self.lp_pair_mean = combine(self.lp_samples, self.lp_pair_mean, other.lp_samples, other.lp_pair_mean);
        self.sensitivity_builds += other.sensitivity_builds;
        self.lp_samples += other.lp_samples;
        self.sensitivity_max = self.sensitivity_max.max(other.sensitivity_max);
        self.lp_pair_max = self.lp_pair_max.max(other.lp_pair_max);
    }
}

pub fn timing_report(traj: &Trajectory) -> TimingReport {
    let mut r = TimingReport::default();
    r.add(traj);
    r
}

/// What one run produced, reduced to what a campaign keeps.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub timings: TimingReport,
    /// The power flow failed (as opposed to a run that merely did not clear
    /// its violations).
    pub failed: bool,
}

pub fn run_meta(prep: &Prepared, spec: &RunSpec, traj: &Trajectory, error: Option<&SimError>) -> RunMeta {
    let net = &prep.net;
    RunMeta {
        id: spec.id.clone(),
        group: spec.group.clone(),
        error: error.map(|e| e.to_string()),
        ratings: traj.ratings.clone(),
        pq_bus_ids: net.pq_indices().iter().map(|&i| net.buses()[i].id).collect(),
        v_bar: spec.config.params.v_bar,
        f_nominal: spec.config.dyn_params.f_nominal,
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CampaignError> {
    std::fs::write(&path, contents).map_err(|e| CampaignError::Io(path, e))
}

/// Summarizes one run and, when `dir` is given, writes its artifacts to
/// `dir/runs/<id>/`.
pub fn record_run(
    prep: &Prepared,
    spec: &RunSpec,
    result: Result<Trajectory, SimulationFailure>,
    dir: Option<&Path>,
) -> Result<RunOutcome, CampaignError> {
    let (traj, error) = match result {
        Ok(t) => (t, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    let mut meta = run_meta(prep, spec, &traj, error.as_ref());
    if meta.ratings.is_empty() {
        meta.ratings = prep.net.lines().iter().map(|l| l.s_rating).collect();
    }
    let summary = summarize_trajectory(&traj, &meta);
    if let Some(dir) = dir {
        let run_dir = dir.join("runs").join(&spec.id);
        std::fs::create_dir_all(&run_dir).map_err(|e| CampaignError::Io(run_dir.clone(), e))?;
        write(run_dir.join("trajectory.csv"), traj.to_csv())?;
        write(run_dir.join("events.jsonl"), traj.events_jsonl())?;
        let controller: String = traj
            .controller
            .iter()
            .map(|c| c.log_record(&prep.net).to_string() + "\n")
            .collect();
        write(run_dir.join("controller.jsonl"), controller)?;
        write(
            run_dir.join("run.json"),
            serde_json::to_string_pretty(&meta).expect("metadata serializes"),
        )?;
        write(
            run_dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(RunOutcome {
        timings: timing_report(&traj),
        failed: error.is_some(),
        summary,
    })
}

/// Campaign-level result.
#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupAggregate>,
    pub timings: TimingReport,
    pub failures: usize,
}

impl CampaignReport {
    pub fn from_outcomes(outcomes: &[RunOutcome]) -> Self {
        let runs: Vec<RunSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
        let mut timings = TimingReport::default();
        for o in outcomes {
            timings.merge(&o.timings);
        }
        CampaignReport {
            groups: aggregate(&runs),
            failures: outcomes.iter().filter(|o| o.failed).count(),
            runs,
            timings,
        }
    }

    pub fn all_converged(&self) -> bool {
        self.failures == 0 && self.runs.iter().all(|r| r.converged)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CampaignError> {
        write(dir.join("summary.csv"), runs_csv(&self.runs))?;
        write(dir.join("aggregates.csv"), aggregates_csv(&self.groups))?;
        write(dir.join("summary.txt"), aggregates_text(&self.groups))?;
        write(
            dir.join("timings.json"),
            serde_json::to_string_pretty(&self.timings).expect("timings serialize"),
        )
    }
}

/// Runs a prepared campaign and writes all artifacts below `out`.
pub fn execute(prep: &Prepared, workers: usize, out: Option<&Path>) -> Result<CampaignReport, CampaignError> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CampaignError::Io(dir.to_path_buf(), e))?;
        write(
            dir.join("scenario.json"),
            serde_json::to_string_pretty(&prep.scenario).expect("scenario serializes"),
        )?;
        write(dir.join("case.json"), prep.net.to_json())?;
    }
    let outcomes = run_campaign(prep, workers, |spec, result| record_run(prep, spec, result, out))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let report = CampaignReport::from_outcomes(&outcomes);
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
