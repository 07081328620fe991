//! qedge: synthetic-model generation, requantization, throughput/energy
//! benchmarking and published-table reproduction.
//!
//! Exit codes: 0 success, 1 reproduction-diff failure, 2 usage or input
//! error, 3 runtime measurement error.

mod commands;
mod manifest;
mod quotes;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "qedge", version, about = "desk-scale quantized inference toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic model container.
    GenerateModel(commands::generate::GenerateArgs),
    /// Requantize a full-precision container to a lower-bit format.
    Quantize(commands::quantize::QuantizeArgs),
    /// Measure generation latency and derive throughput/energy metrics.
    Bench(commands::bench::BenchArgs),
    /// Re-derive the published latency/power table and diff the quoted
    /// figures.
    ReproduceTable(commands::reproduce::ReproduceArgs),
    /// Time matvec kernels across formats and report the throughput
    /// ordering.
    Sweep(commands::sweep::SweepArgs),
}

/// Command failure, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Usage or input problem (exit 2).
    Input(String),
    /// Reproduction diff beyond tolerance (exit 1).
    Diff(String),
    /// Runtime measurement failure (exit 3).
    Measurement(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Diff(_) => 1,
            CliError::Input(_) => 2,
            CliError::Measurement(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Diff(m) | CliError::Measurement(m) => m,
        }
    }
}

impl From<qedge_core::Error> for CliError {
    fn from(err: qedge_core::Error) -> Self {
        match err {
            qedge_core::Error::Measurement(m) => CliError::Measurement(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Input(err.to_string())
    }
}

pub type CliResult = Result<(), CliError>;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateModel(args) => commands::generate::run(args),
        Command::Quantize(args) => commands::quantize::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::ReproduceTable(args) => commands::reproduce::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}
