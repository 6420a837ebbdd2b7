//! Re-run one recorded run up to a given metrics row and compare.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use crate::config::load_config;
use crate::experiment::{new_trainer, read_metrics, MetricsRow, CONFIG_SNAPSHOT};

/// `<metrics csv>:<row>`, where row 1 is the first line after the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRowRef {
    pub path: PathBuf,
    pub row: usize,
}

impl FromStr for CsvRowRef {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (path, row) = s
            .rsplit_once(':')
            .ok_or_else(|| anyhow!("expected <metrics.csv>:<row>, got {s:?}"))?;
        let row: usize = row.parse().map_err(|e| anyhow!("row {row:?}: {e}"))?;
        if row == 0 || path.is_empty() {
            bail!("expected <metrics.csv>:<row> with row >= 1, got {s:?}");
        }
        Ok(CsvRowRef {
            path: PathBuf::from(path),
            row,
        })
    }
}

impl fmt::Display for CsvRowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.path.display(), self.row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub recorded: MetricsRow,
    pub replayed: MetricsRow,
}

impl ReplayOutcome {
    /// Byte-level comparison of the two CSV records.
    pub fn matches(&self) -> bool {
        self.recorded.to_record() == self.replayed.to_record()
    }
}

/// Rebuild the run from the `config.toml` snapshot beside the CSV and step it
/// to the referenced iteration.
pub fn replay(reference: &CsvRowRef) -> Result<ReplayOutcome> {
    let rows = read_metrics(&reference.path)?;
    let recorded = rows.get(reference.row - 1).cloned().ok_or_else(|| {
        anyhow!(
            "{} has only {} data rows",
            reference.path.display(),
            rows.len()
        )
    })?;
    let dir = reference.path.parent().unwrap_or(Path::new("."));
    let config =
        load_config(&dir.join(CONFIG_SNAPSHOT)).context("loading the run's config snapshot")?;
    let resolved = config.resolve()?;
    if recorded.iteration >= resolved.algo.iterations {
        bail!(
            "row refers to iteration {} but the config runs {} iterations",
            recorded.iteration,
            resolved.algo.iterations
        );
    }
    let mut trainer = new_trainer(&resolved, recorded.seed)?;
    loop {
        let report = trainer
            .step()
            .with_context(|| format!("replaying run {} (seed {})", recorded.run, recorded.seed))?;
        if report.iteration == recorded.iteration {
            let replayed = MetricsRow::from_report(
                recorded.run,
                recorded.seed,
                trainer.trajectories_per_agent(),
                &report,
            );
            return Ok(ReplayOutcome { recorded, replayed });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_references() {
        let r: CsvRowRef = "out/metrics_run001.csv:17".parse().unwrap();
        assert_eq!(r.path, PathBuf::from("out/metrics_run001.csv"));
        assert_eq!(r.row, 17);
        assert!("nocolon".parse::<CsvRowRef>().is_err());
        assert!("a.csv:0".parse::<CsvRowRef>().is_err());
        assert!("a.csv:x".parse::<CsvRowRef>().is_err());
    }
}
