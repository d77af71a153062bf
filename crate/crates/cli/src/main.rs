//! `groundkit`: command-line driver for corpus preparation, training runs,
//! benchmark evaluation and ablations.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! run fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use groundkit::corpus::Platform;
use groundkit::eval::{Benchmark, ReportFormat};

#[derive(Debug, Parser)]
#[command(
    name = "groundkit",
    version,
    about = "GUI-grounding data recipes, training runs and benchmark evaluation"
)]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(short, long, global = true, default_value = "groundkit.toml")]
    pub config: PathBuf,
    /// Root seed; every module seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest configured sources into a canonical corpus file.
    Ingest,
    /// Per-platform, per-source and resolution counts.
    Stats,
    /// Seeded uniform subsample of corpus ids.
    Sample {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        platform: Option<Platform>,
    },
    /// Resolve and save the stage-1 and stage-2 recipes.
    Recipe,
    /// Report exact-duplicate screenshots.
    Redundancy,
    /// Run the configured training schedule.
    Train,
    /// Evaluate the backend on every configured benchmark.
    Eval {
        /// Adapter directory to load into the mock backend.
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Run an ablation plan.
    Ablate {
        /// Plan file, overriding the config.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Re-aggregate saved predictions and print a report.
    Report {
        #[arg(long)]
        benchmark: Benchmark,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

/// A failed invocation, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait FailureExt<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> FailureExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
