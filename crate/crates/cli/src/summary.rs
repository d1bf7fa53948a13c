//! Per-run summaries, campaign aggregates and their text/CSV renderings.
//!
//! A summary is computed from the same columns that the trajectory CSV
//! holds, so re-deriving it from the written artifacts reproduces the
//! summary emitted during the run.

use std::fmt::Write as _;
use std::path::Path;

use gridrelief_core::simulator::Trajectory;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}: {1}")]
    Corrupt(String, String),
    #[error("no runs found in {0}")]
    Empty(String),
}

/// Static facts about a run that the trajectory CSV does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub id: String,
    pub group: String,
    /// Failure message when the run aborted.
    pub error: Option<String>,
    /// Per trajectory line column.
    pub ratings: Vec<Option<f64>>,
    pub pq_bus_ids: Vec<usize>,
    pub v_bar: f64,
    pub f_nominal: f64,
}

/// Counts of violated constraints at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub overloads: usize,
    pub undervoltages: usize,
    pub overvoltages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub group: String,
    pub converged: bool,
    pub error: Option<String>,
    pub steps: usize,
    /// Time until L first returns to zero (s).
    pub elapsed: Option<f64>,
    pub peak_l: f64,
    pub final_l: Option<f64>,
    pub max_df: f64,
    pub start: ViolationCounts,
    pub end: ViolationCounts,
}

/// Column data of a trajectory, either in memory or parsed from CSV.
pub struct Columns<'a> {
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    pub l: Vec<f64>,
    pub flows: Vec<&'a [f64]>,
    pub v: Vec<&'a [f64]>,
    pub bus_ids: &'a [usize],
}

fn counts(flows: &[f64], v: &[f64], bus_ids: &[usize], meta: &RunMeta) -> ViolationCounts {
    let mut c = ViolationCounts {
        overloads: flows
            .iter()
            .zip(&meta.ratings)
            .filter(|(s, r)| r.is_some_and(|r| **s > r))
            .count(),
        ..ViolationCounts::default()
    };
    for (id, v) in bus_ids.iter().zip(v) {
        if meta.pq_bus_ids.contains(id) {
            if *v < 1.0 - meta.v_bar {
                c.undervoltages += 1;
            } else if *v > 1.0 + meta.v_bar {
                c.overvoltages += 1;
            }
        }
    }
    c
}

pub fn summarize_columns(cols: &Columns<'_>, meta: &RunMeta) -> RunSummary {
    let n = cols.t.len();
    let onset = cols.l.iter().position(|l| *l > 0.0);
    let elapsed = match onset {
        None => (n > 0).then_some(0.0),
        Some(k) => cols.l[k..]
            .iter()
            .position(|l| *l == 0.0)
            .map(|j| cols.t[k + j] - cols.t[0]),
    };
    let at = |k: usize| counts(cols.flows[k], cols.v[k], cols.bus_ids, meta);
    let final_l = cols.l.last().copied();
    RunSummary {
        id: meta.id.clone(),
        group: meta.group.clone(),
        converged: meta.error.is_none() && final_l == Some(0.0),
        error: meta.error.clone(),
        steps: n,
        elapsed,
        peak_l: cols.l.iter().copied().fold(0.0, f64::max),
        final_l,
        max_df: cols.f.iter().map(|f| (f - meta.f_nominal).abs()).fold(0.0, f64::max),
        start: if n > 0 { at(0) } else { ViolationCounts::default() },
        end: if n > 0 { at(n - 1) } else { ViolationCounts::default() },
    }
}

pub fn summarize_trajectory(traj: &Trajectory, meta: &RunMeta) -> RunSummary {
    let cols = Columns {
        t: traj.steps.iter().map(|s| s.t).collect(),
        f: traj.steps.iter().map(|s| s.f).collect(),
        l: traj.steps.iter().map(|s| s.l).collect(),
        flows: traj.steps.iter().map(|s| s.s_flow.as_slice()).collect(),
        v: traj.steps.iter().map(|s| s.v.as_slice()).collect(),
        bus_ids: &traj.bus_ids,
    };
    summarize_columns(&cols, meta)
}

/// Re-derives a summary from `trajectory.csv` and `run.json` in `dir`.
pub fn summarize_run_dir(dir: &Path) -> Result<RunSummary, SummaryError> {
    let name = dir.display().to_string();
    let read = |f: &str| std::fs::read_to_string(dir.join(f)).map_err(|e| SummaryError::Io(format!("{name}/{f}"), e));
    let meta: RunMeta = serde_json::from_str(&read("run.json")?)
        .map_err(|e| SummaryError::Corrupt(format!("{name}/run.json"), e.to_string()))?;
    let csv = read("trajectory.csv")?;
    let corrupt = |msg: String| SummaryError::Corrupt(format!("{name}/trajectory.csv"), msg);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| corrupt("empty file".into()))?.split(',').collect();
    let span = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|id| id.parse::<usize>().is_ok()))
            .map(|(k, _)| k)
            .collect()
    };
    let flow_cols = span("flow_");
    let v_cols = span("v_");
    if header.get(..3) != Some(&["t", "f", "L"][..]) || flow_cols.len() != meta.ratings.len() {
        return Err(corrupt("unexpected header".into()));
    }
    let bus_ids: Vec<usize> = v_cols.iter().map(|&k| header[k][2..].parse().expect("checked above")).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| corrupt(format!("row {}: {e}", k + 1)))?;
        if row.len() != header.len() {
            return Err(corrupt(format!("row {} has {} fields", k + 1, row.len())));
        }
        rows.push(row);
    }
    let flows: Vec<Vec<f64>> = rows.iter().map(|r| flow_cols.iter().map(|&k| r[k]).collect()).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| v_cols.iter().map(|&k| r[k]).collect()).collect();
    let cols = Columns {
        t: rows.iter().map(|r| r[0]).collect(),
        f: rows.iter().map(|r| r[1]).collect(),
        l: rows.iter().map(|r| r[2]).collect(),
        flows: flows.iter().map(Vec::as_slice).collect(),
        v: v.iter().map(Vec::as_slice).collect(),
        bus_ids: &bus_ids,
    };
    Ok(summarize_columns(&cols, &meta))
}

/// Summaries of every run directory below `dir`, sorted by id.
pub fn summarize_dir(dir: &Path) -> Result<Vec<RunSummary>, SummaryError> {
    let runs = dir.join("runs");
    let entries = std::fs::read_dir(&runs).map_err(|e| SummaryError::Io(runs.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| SummaryError::Io(runs.display().to_string(), e))?;
        if entry.path().join("run.json").is_file() {
            out.push(summarize_run_dir(&entry.path())?);
        }
    }
    if out.is_empty() {
        return Err(SummaryError::Empty(dir.display().to_string()));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAggregate {
    pub group: String,
    pub runs: usize,
    pub converged: usize,
    pub mean_elapsed: Option<f64>,
    pub min_elapsed: Option<f64>,
    pub max_elapsed: Option<f64>,
}

impl GroupAggregate {
    pub fn success_rate(&self) -> f64 {
        self.converged as f64 / self.runs as f64
    }
}

/// Aggregates per group in order of first appearance; elapsed-time
/// statistics cover converged runs only.
pub fn aggregate(rows: &[RunSummary]) -> Vec<GroupAggregate> {
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group) {
            groups.push(r.group.clone());
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let members: Vec<&RunSummary> = rows.iter().filter(|r| r.group == g).collect();
            let times: Vec<f64> = members.iter().filter(|r| r.converged).filter_map(|r| r.elapsed).collect();
            let n = times.len() as f64;
            GroupAggregate {
                runs: members.len(),
                converged: members.iter().filter(|r| r.converged).count(),
                mean_elapsed: (!times.is_empty()).then(|| times.iter().sum::<f64>() / n),
                min_elapsed: times.iter().copied().reduce(f64::min),
                max_elapsed: times.iter().copied().reduce(f64::max),
                group: g,
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |x| format!("{x}"))
}

pub fn runs_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from(
        "id,group,converged,elapsed,peak_L,final_L,max_df,overloads_start,undervoltages_start,overvoltages_start,overloads_end,undervoltages_end,overvoltages_end,error\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"",
            r.id,
            r.group,
            r.converged,
            opt(r.elapsed),
            r.peak_l,
            opt(r.final_l),
            r.max_df,
            r.start.overloads,
            r.start.undervoltages,
            r.start.overvoltages,
            r.end.overloads,
            r.end.undervoltages,
            r.end.overvoltages,
            r.error.as_deref().unwrap_or("").replace('"', "'"),
        );
    }
    out
}

pub fn aggregates_csv(groups: &[GroupAggregate]) -> String {
    let mut out = String::from("group,runs,converged,mean_elapsed,min_elapsed,max_elapsed\n");
    for g in groups {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            g.group,
            g.runs,
            g.converged,
            opt(g.mean_elapsed),
            opt(g.min_elapsed),
            opt(g.max_elapsed)
        );
    }
    out
}

/// Human-readable table of the aggregates.
pub fn aggregates_text(groups: &[GroupAggregate]) -> String {
    let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    let mut out = format!(
        "{:<16} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
        "group", "runs", "success", "mean [s]", "min [s]", "max [s]"
    );
    for g in groups {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>8.1}% {:>9} {:>9} {:>9}",
            g.group,
            g.runs,
            100.0 * g.success_rate(),
            f(g.mean_elapsed),
            f(g.min_elapsed),
            f(g.max_elapsed)
        );
    }
    out
}
