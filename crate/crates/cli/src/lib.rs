//! Command-line surface: plan inspection, bit-exact verification runs,
//! scenario simulation and calibration.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use handoff_core::simulator::Strategy;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("verification failed: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Mismatch(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "handoff", version, about = "Plan, verify and simulate live reconfiguration of training state")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Live,
    Cold,
    Reshape,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Live => Strategy::Live,
            StrategyArg::Cold => Strategy::Cold,
            StrategyArg::Reshape => Strategy::Reshape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    /// Remove the last task of the plan.
    Drop,
    /// Repeat the first task of the plan.
    Duplicate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the transfer plan between two named configurations.
    Plan {
        config: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Write the plan here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a plan over in-memory transport and compare against a
    /// gather-and-reslice reference.
    Verify {
        config: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = handoff_core::executor::DEFAULT_STAGING_BYTES)]
        staging_bytes: u64,
        /// Disable splitting of tasks larger than the staging buffer.
        #[arg(long)]
        no_chunking: bool,
        /// Corrupt the plan before executing it.
        #[arg(long, value_enum)]
        mutate: Option<Mutation>,
    },
    /// Run the configured scenario and write per-event CSV and summaries.
    Simulate {
        config: PathBuf,
        /// Strategies to run; all three when omitted.
        #[arg(long, value_enum)]
        strategy: Vec<StrategyArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the file's scenario with a regime preset.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit restart constants to measured traces.
    Calibrate {
        config: PathBuf,
        traces: PathBuf,
        /// Write the fitted cost model here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print live and restart downtime for the model presets.
    Speedup {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.7b,7b,14b,20b,30b,70b")]
        models: Vec<String>,
    },
}

/// Runs `cli`, writing human output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cli.command {
        Command::Plan { config, from, to, out: path } => commands::plan(&config, &from, &to, path.as_deref(), out),
        Command::Verify {
            config,
            from,
            to,
            seed,
            staging_bytes,
            no_chunking,
            mutate,
        } => commands::verify(&config, &from, &to, seed, staging_bytes, !no_chunking, mutate, out),
        Command::Simulate {
            config,
            strategy,
            seed,
            regime,
            out: dir,
        } => {
            let strategies: Vec<Strategy> = if strategy.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategy.into_iter().map(Strategy::from).collect()
            };
            commands::simulate(&config, &strategies, seed, regime.as_deref(), &dir, out)
        }
        Command::Calibrate { config, traces, out: path } => commands::calibrate(&config, &traces, path.as_deref(), out),
        Command::Speedup { config, models } => commands::speedup(&config, &models, out),
    }
}
