#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] homquant_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use homquant_core::Error as E;
        match self {
            CliError::Core(E::Infeasible { .. } | E::NotCertified(_)) => 2,
            CliError::Core(E::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "homquant", version, about = "Homogeneous quantized feedback: synthesis, verification and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Homogenize the plant and synthesize a certified gain.
    Synthesize(Common),
    /// Re-check the LMI margins of a certificate file.
    Verify(VerifyArgs),
    /// Quantize sample states and print their codes.
    QuantizeDemo(Common),
    /// Simulate the quantized closed loop and write the trace.
    Simulate(Common),
    /// Settling time and feasibility over a list of seed budgets.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Seed budget as a bit count, `N = 2^bits`.
    #[arg(long, conflicts_with = "budget")]
    pub bits: Option<u32>,
    /// Seed budget `N`.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, value_enum)]
    pub floor_mode: Option<Switch>,
    /// Integration step.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Certificate file to use instead of synthesizing.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Certificate file.
    #[arg(long)]
    pub certificate: PathBuf,
    /// Run configuration; supplies the plant when the certificate has none.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated seed budgets.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(args) => commands::synthesize(&args),
        Command::Verify(args) => commands::verify(&args),
        Command::QuantizeDemo(args) => commands::quantize_demo(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Sweep(args) => commands::sweep(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
