//! Command-line driver: one TOML file describes an experiment, subcommands
//! run its stages and write everything under the output directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] memprune::Error),
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(memprune::Error::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memprune", version, about = "Loss-based structured pruning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic membrane images, masks and a manifest.
    Synth(Common),
    /// Train the reference network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total iterations (the schedule still spans
        /// the configured total).
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Order, prune and retrain for every strategy and plan.
    Prune(Common),
    /// Accuracy, timing, parameter and memory table plus probability maps.
    Eval(Common),
    /// Ordering-curve data and a merged report.
    Report(Common),
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
