//! `stap`: fit STAP regression models from delimited tables.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stap_core::StapError;
use thiserror::Error;

use config::Overrides;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Stap(#[from] StapError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Stap(e) => e.exit_code() as u8,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stap", version, about = "Bayesian spatial-temporal aggregated predictor regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scenario {
    CrossSectional,
    Longitudinal,
    GroupedBinomial,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the posterior and write draws, summaries and diagnostics.
    Fit {
        /// TOML run configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic dataset and a matching run configuration.
    Simulate {
        #[arg(long, value_enum, default_value = "cross-sectional")]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
        /// Data-generation seed (defaults to the scenario's own).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of subjects (schools for the binomial scenario).
        #[arg(long)]
        n_subjects: Option<usize>,
    },
    /// Posterior quantiles of the distance at which exposure becomes negligible.
    Termination {
        /// Resolved configuration written by `fit`.
        #[arg(long)]
        config: PathBuf,
        /// Draws table written by `fit`.
        #[arg(long)]
        draws: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        exposure_limit: f64,
        #[arg(long, default_value_t = 0.95)]
        prob: f64,
        /// Truncation point (defaults to the configured max distance).
        #[arg(long)]
        max_value: Option<f64>,
        #[arg(long, default_value_t = 2)]
        digits: usize,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior predictive replicates and the mean_PPD summary.
    Ppc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        draws: PathBuf,
        /// Output directory (defaults to the draws table's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { config, overrides } => run::fit(config.as_deref(), &overrides),
        Command::Simulate { scenario, out, seed, n_subjects } => run::simulate(scenario, &out, seed, n_subjects),
        Command::Termination { config, draws, exposure_limit, prob, max_value, digits, out } => {
            run::termination(&config, &draws, exposure_limit, prob, max_value, digits, out.as_deref())
        }
        Command::Ppc { config, draws, out } => run::ppc(&config, &draws, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
