use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fedpg_cli::config::load_config;
use fedpg_cli::conformance::{run_suite, Suite};
use fedpg_cli::experiment::run_experiment;
use fedpg_cli::replay::{replay, CsvRowRef};

#[derive(Parser)]
#[command(
    name = "fedpg",
    version,
    about = "Byzantine-resilient federated policy-gradient simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Root seed of the first run (overrides experiment.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of independent runs (overrides experiment.runs).
        #[arg(long)]
        runs: Option<usize>,
        /// Output directory.
        #[arg(long, env = "FEDPG_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo conformance suite: aggregation, agreement or estimators.
    Conformance {
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials (samples for the estimator suite).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Re-run a recorded run to a metrics row and compare, e.g. `out/metrics_run000.csv:17`.
    Replay { reference: CsvRowRef },
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            runs,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.experiment.seed = seed;
                cfg.experiment.seeds = None;
            }
            if let Some(runs) = runs {
                cfg.experiment.runs = runs;
                cfg.experiment.seeds = None;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir());
            let result = run_experiment(&cfg, Some(&dir))?;
            println!("{} runs written to {}", result.runs.len(), dir.display());
            if let Some(last) = result.summary.last() {
                println!(
                    "final: {} trajectories/agent, mean return {:.3} ± {:.3}",
                    last.trajectories_per_agent, last.mean_return, last.std_return
                );
            }
            Ok(true)
        }
        Command::Conformance {
            suite,
            seed,
            trials,
        } => {
            let report = run_suite(suite, seed, trials)?;
            print!("{report}");
            Ok(report.passed())
        }
        Command::Replay { reference } => {
            let outcome = replay(&reference)?;
            println!("recorded: {}", outcome.recorded.to_record().join(","));
            println!("replayed: {}", outcome.replayed.to_record().join(","));
            if outcome.matches() {
                println!("match");
            } else {
                eprintln!("mismatch at {reference}");
            }
            Ok(outcome.matches())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
