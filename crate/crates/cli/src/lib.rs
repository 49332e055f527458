//! Command-line experiment runner for `moelab`.
//!
//! Every command resolves a typed config (flags over file over defaults),
//! runs, and returns a [`RunReport`] whose payload depends only on the
//! config. The echoed config is itself a valid config file, so a report can
//! be replayed with `--config`.

pub mod alloc;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};
pub use report::RunReport;

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Mixture-of-Experts routing laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Training-success probability of token or expert choice routing.
    Simulate(commands::simulate::SimulateArgs),
    /// Route a token file and report the plan, load and losses.
    Route(commands::route::RouteArgs),
    /// Train the toy MoE on the synthetic patch model.
    Train(commands::train::TrainArgs),
    /// Generate synthetic token features and their correlation structure.
    Features(commands::features::FeaturesArgs),
    /// Dispatch throughput across a grid of sizes.
    Bench(commands::bench::BenchArgs),
}

impl Command {
    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Simulate(a) => a.out.as_ref(),
            Command::Route(a) => a.out.as_ref(),
            Command::Train(a) => a.out.as_ref(),
            Command::Features(a) => a.out.as_ref(),
            Command::Bench(a) => a.out.as_ref(),
        }
    }
}

/// Runs a parsed command and stamps its wall time.
pub fn execute(command: &Command) -> CliResult<RunReport> {
    let start = Instant::now();
    let mut report = match command {
        Command::Simulate(a) => commands::simulate::run(&a.resolve()?),
        Command::Route(a) => commands::route::run(&a.resolve()?),
        Command::Train(a) => commands::train::run(&a.resolve()?, &a.metrics),
        Command::Features(a) => commands::features::run(&a.resolve()?, a.tokens.as_ref(), a.correlation.as_ref()),
        Command::Bench(a) => commands::bench::run(&a.resolve()?),
    }?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Writes the report to `out`, or returns it for stdout.
pub fn emit(report: &RunReport, out: Option<&PathBuf>) -> CliResult<Option<String>> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    match out {
        Some(p) => std::fs::write(p, text + "\n")
            .map(|_| None)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display()))),
        None => Ok(Some(text)),
    }
}
