mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedtate_core::error::Error;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;
pub const EXIT_OTHER: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        CliError {
            code: EXIT_OTHER,
            message: format!("{context}: {e}"),
        }
    }

    /// Input and configuration problems exit 2, failures while running the
    /// protocol exit 3.
    pub fn from_core(e: Error) -> Self {
        CliError {
            code: Self::code_of(&e),
            message: e.to_string(),
        }
    }

    fn code_of(e: &Error) -> u8 {
        match e {
            Error::Config(_)
            | Error::Csv { .. }
            | Error::InvalidDataset { .. }
            | Error::EmptyDataset(_)
            | Error::Dimension(_) => EXIT_VALIDATION,
            Error::Io(_) => EXIT_OTHER,
            Error::Site { source, .. } => Self::code_of(source),
            _ => EXIT_PROTOCOL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fedtate", version, about = "Federated doubly robust target treatment effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo study and write metrics, replications and a manifest.
    Simulate(SimulateArgs),
    /// Run the one-round protocol on a CSV of sites.
    Estimate(EstimateArgs),
    /// Merge metrics files into a markdown table and a long CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved settings and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated λ values.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub spec: Option<String>,
    #[arg(long)]
    pub density: Option<String>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "P")]
    pub p: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    /// CSV with columns site_id,a,y,x1,...,xp.
    pub data: PathBuf,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub penalty: Option<String>,
    /// continuous or binary.
    #[arg(long)]
    pub outcome: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.csv files or directories holding one.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory for report.md and report_long.csv; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Report(a) => report::run(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
