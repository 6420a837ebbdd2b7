//! Seeded multi-run batches, per-run metrics CSVs and the cross-run summary.
//!
//! Metrics file columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `run` | run index within the experiment |
//! | `seed` | root seed of the run |
//! | `iteration` | t, starting at 0 |
//! | `trajectories_per_agent` | trajectories each honest agent has sampled after t |
//! | `large_batch` | 1 if the large-batch branch ran at t, else 0 |
//! | `mean_honest_return` | mean undiscounted return over honest samplers |
//! | `honest_returns` | `;`-separated per-agent mean returns, empty for Byzantine or idle agents |
//! | `max_importance_weight` | largest ω used at t, empty when no correction ran |
//! | `honest_diameter` | largest pairwise distance between honest parameters after t |
//!
//! Summary columns: `trajectories_per_agent, mean_return, std_return, runs`.
//! Floats use Rust's shortest round-trip formatting, so files are
//! byte-identical across repeated runs.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fedpg_core::algorithms::{IterationReport, Trainer};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentSection, ResolvedConfig};

pub const METRICS_HEADER: [&str; 9] = [
    "run",
    "seed",
    "iteration",
    "trajectories_per_agent",
    "large_batch",
    "mean_honest_return",
    "honest_returns",
    "max_importance_weight",
    "honest_diameter",
];

pub const SUMMARY_HEADER: [&str; 4] = [
    "trajectories_per_agent",
    "mean_return",
    "std_return",
    "runs",
];

/// Name of the filled config written next to the metrics files.
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: usize,
    pub seed: u64,
    pub iteration: usize,
    pub trajectories_per_agent: u64,
    pub large_batch: bool,
    pub mean_honest_return: f64,
    pub honest_returns: Vec<Option<f64>>,
    pub max_importance_weight: Option<f64>,
    pub honest_diameter: f64,
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = record
        .get(idx)
        .ok_or_else(|| anyhow!("missing column {}", METRICS_HEADER[idx]))?;
    raw.parse::<T>()
        .map_err(|e| anyhow!("column {}: {raw:?}: {e}", METRICS_HEADER[idx]))
}

impl MetricsRow {
    pub fn from_report(run: usize, seed: u64, trajectories: u64, report: &IterationReport) -> Self {
        MetricsRow {
            run,
            seed,
            iteration: report.iteration,
            trajectories_per_agent: trajectories,
            large_batch: report.large_batch,
            mean_honest_return: report.mean_honest_return,
            honest_returns: report.honest_returns.clone(),
            max_importance_weight: report.max_importance_weight,
            honest_diameter: report.honest_diameter,
        }
    }

    pub fn to_record(&self) -> Vec<String> {
        let returns: Vec<String> = self
            .honest_returns
            .iter()
            .map(|r| r.map(|x| x.to_string()).unwrap_or_default())
            .collect();
        vec![
            self.run.to_string(),
            self.seed.to_string(),
            self.iteration.to_string(),
            self.trajectories_per_agent.to_string(),
            u8::from(self.large_batch).to_string(),
            self.mean_honest_return.to_string(),
            returns.join(";"),
            self.max_importance_weight
                .map(|w| w.to_string())
                .unwrap_or_default(),
            self.honest_diameter.to_string(),
        ]
    }

    pub fn from_record(record: &csv::StringRecord) -> Result<Self> {
        if record.len() != METRICS_HEADER.len() {
            bail!(
                "expected {} columns, found {}",
                METRICS_HEADER.len(),
                record.len()
            );
        }
        let honest_returns = record[6]
            .split(';')
            .map(|s| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| anyhow!("column honest_returns: {e}"))?;
        let weight = &record[7];
        Ok(MetricsRow {
            run: parse_field(record, 0)?,
            seed: parse_field(record, 1)?,
            iteration: parse_field(record, 2)?,
            trajectories_per_agent: parse_field(record, 3)?,
            large_batch: parse_field::<u8>(record, 4)? == 1,
            mean_honest_return: parse_field(record, 5)?,
            honest_returns,
            max_importance_weight: if weight.is_empty() {
                None
            } else {
                Some(parse_field(record, 7)?)
            },
            honest_diameter: parse_field(record, 8)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub trajectories_per_agent: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

/// Trailing mean over the last `window` values.
#[derive(Debug, Clone)]
pub struct Smoother {
    window: usize,
    values: VecDeque<f64>,
}

impl Smoother {
    pub fn new(window: usize) -> Self {
        Smoother {
            window,
            values: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, value: f64) -> f64 {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(value);
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.values.len() == self.window
    }
}

pub fn new_trainer(resolved: &ResolvedConfig, seed: u64) -> Result<Trainer> {
    let mut trainer = Trainer::new(
        resolved.env.clone(),
        resolved.policy.clone(),
        resolved.algo.clone(),
        resolved.aggregator.clone(),
        resolved.agreement.clone(),
        resolved.adversary.clone(),
        seed,
    )?;
    trainer.discard_checkpoints();
    Ok(trainer)
}

/// One seeded run. Every iteration is handed to `on_row`; the returned rows
/// are thinned to `metric_every` (the final iteration is always kept).
pub fn run_single(
    resolved: &ResolvedConfig,
    section: &ExperimentSection,
    run: usize,
    seed: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunResult> {
    let mut trainer = new_trainer(resolved, seed)?;
    let mut smoother = Smoother::new(section.smoothing_window);
    let mut rows = Vec::new();
    let iterations = resolved.algo.iterations;
    for t in 0..iterations {
        let report = trainer.step()?;
        let row = MetricsRow::from_report(run, seed, trainer.trajectories_per_agent(), &report);
        on_row(&row);
        let smoothed = smoother.push(row.mean_honest_return);
        let budget_spent = section
            .max_trajectories
            .is_some_and(|b| row.trajectories_per_agent >= b);
        let reached = section
            .stop_return
            .is_some_and(|target| smoother.is_full() && smoothed >= target);
        let last = t + 1 == iterations || budget_spent || reached;
        if t % section.metric_every == 0 || last {
            rows.push(row);
        }
        if last {
            break;
        }
    }
    Ok(RunResult { run, seed, rows })
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(METRICS_HEADER)?;
    for row in rows {
        writer.write_record(row.to_record())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn metrics_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("metrics_run{run:03}.csv"))
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Mean ± std across runs on the union of the runs' trajectory counts.
/// A run's value at x is its latest row with at most x trajectories; the grid
/// covers the range where every run has a value.
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let runs: Vec<&RunResult> = runs.iter().filter(|r| !r.rows.is_empty()).collect();
    if runs.is_empty() {
        return Vec::new();
    }
    let lo = runs
        .iter()
        .map(|r| r.rows[0].trajectories_per_agent)
        .max()
        .unwrap_or(0);
    let hi = runs
        .iter()
        .map(|r| r.rows[r.rows.len() - 1].trajectories_per_agent)
        .min()
        .unwrap_or(0);
    let mut grid: Vec<u64> = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.trajectories_per_agent))
        .filter(|x| (lo..=hi).contains(x))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    let mut cursors = vec![0usize; runs.len()];
    grid.into_iter()
        .map(|x| {
            let values: Vec<f64> = runs
                .iter()
                .zip(cursors.iter_mut())
                .map(|(run, c)| {
                    while *c + 1 < run.rows.len() && run.rows[*c + 1].trajectories_per_agent <= x {
                        *c += 1;
                    }
                    run.rows[*c].mean_honest_return
                })
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            SummaryRow {
                trajectories_per_agent: x,
                mean_return: mean,
                std_return: sample_std(&values, mean),
                runs: values.len(),
            }
        })
        .collect()
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(SUMMARY_HEADER)?;
    for r in rows {
        writer.write_record([
            r.trajectories_per_agent.to_string(),
            r.mean_return.to_string(),
            r.std_return.to_string(),
            r.runs.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Run every configured seed (in parallel across runs). With `output` set,
/// writes `config.toml`, one `metrics_runNNN.csv` per run and `summary.csv`.
/// Any failing run aborts the experiment with its run id and seed.
pub fn run_experiment(
    config: &ExperimentConfig,
    output: Option<&Path>,
) -> Result<ExperimentResult> {
    let resolved = config.resolve()?;
    let seeds = config.run_seeds()?;
    if let Some(dir) = output {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        config.filled()?.save(&dir.join(CONFIG_SNAPSHOT))?;
    }
    let outcomes: Vec<Result<RunResult>> = seeds
        .par_iter()
        .enumerate()
        .map(|(run, &seed)| {
            let result = run_single(&resolved, &config.experiment, run, seed, |_| {})
                .with_context(|| format!("run {run} (seed {seed}) failed"))?;
            if let Some(dir) = output {
                write_metrics(&metrics_path(dir, run), &result.rows)
                    .with_context(|| format!("run {run} (seed {seed}): writing metrics"))?;
            }
            Ok(result)
        })
        .collect();
    let runs = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&runs);
    if let Some(dir) = output {
        write_summary(&dir.join("summary.csv"), &summary)?;
    }
    Ok(ExperimentResult { runs, summary })
}

/// Read a metrics CSV written by [`run_experiment`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        bail!(
            "{} is not a metrics file (unexpected header)",
            path.display()
        );
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            MetricsRow::from_record(&rec?)
                .with_context(|| format!("{} row {}", path.display(), i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(traj: u64, ret: f64) -> MetricsRow {
        MetricsRow {
            run: 0,
            seed: 0,
            iteration: 0,
            trajectories_per_agent: traj,
            large_batch: false,
            mean_honest_return: ret,
            honest_returns: vec![Some(ret), None],
            max_importance_weight: None,
            honest_diameter: 0.0,
        }
    }

    #[test]
    fn record_round_trip() {
        let mut r = row(54, 21.5);
        r.max_importance_weight = Some(1.25);
        let rec = csv::StringRecord::from(r.to_record());
        assert_eq!(MetricsRow::from_record(&rec).unwrap(), r);
        assert_eq!(r.to_record()[6], "21.5;");
    }

    #[test]
    fn summary_steps_between_grid_points() {
        let a = RunResult {
            run: 0,
            seed: 0,
            rows: vec![row(50, 10.0), row(54, 20.0), row(58, 30.0)],
        };
        let b = RunResult {
            run: 1,
            seed: 1,
            rows: vec![row(50, 20.0), row(100, 40.0)],
        };
        let s = summarize(&[a, b]);
        let xs: Vec<u64> = s.iter().map(|r| r.trajectories_per_agent).collect();
        assert_eq!(xs, vec![50, 54, 58]);
        assert_eq!(s[1].mean_return, 20.0);
        assert_eq!(s[2].mean_return, 25.0);
        assert!((s[0].std_return - 50f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn smoother_window() {
        let mut s = Smoother::new(2);
        assert_eq!(s.push(1.0), 1.0);
        assert!(!s.is_full());
        assert_eq!(s.push(3.0), 2.0);
        assert_eq!(s.push(5.0), 4.0);
    }
}
