use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train normalized density and conditional-probability models from CSV data.
#[derive(Debug, Parser)]
#[command(name = "probe", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a monotone-network density to one numeric column.
    Fit1d(RunArgs),
    /// Fit a triangular flow to several numeric columns.
    Fitnd(RunArgs),
    /// Fit a conditional flow of `columns.t` given `columns.x`.
    FitConditional(RunArgs),
    /// Train a softmax classifier on `columns.label`.
    Classify(RunArgs),
    /// Train a Gaussian regression head of `columns.t` given `columns.x`.
    Regress(RunArgs),
    /// Streaming maximum-likelihood estimate of a Gaussian.
    EstimateParams(RunArgs),
    /// Train a time-evolution density model.
    Evolve(RunArgs),
    /// Run invariant suites and write a JSON report.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input samples (CSV with a header row).
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reference density CSV (`x,phi`, or `coords...,phi`) to compare against.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Numeric,
    Loss,
    Flow1d,
    Flownd,
    Heads,
    Timeevo,
    Verify,
}
