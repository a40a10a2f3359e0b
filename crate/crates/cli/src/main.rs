//! `cdcm` command-line interface.

mod bench;
mod check;
mod config;
mod fit;
mod group;
mod recover;
mod simulate;

use std::process::ExitCode;

use cdcm::CdcmError;
use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad input, missing files, malformed settings.
    User(String),
    /// Numerical failure or a violated identifiability condition.
    Numeric(String),
}

impl From<CdcmError> for CliError {
    fn from(e: CdcmError) -> Self {
        match e {
            CdcmError::InvalidInput(_)
            | CdcmError::DimensionMismatch(_)
            | CdcmError::Parse(_)
            | CdcmError::Io(_)
            | CdcmError::ZeroVariance(_) => CliError::User(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

/// Result of a subcommand that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but a check or convergence criterion failed.
    Failed,
}

#[derive(Parser)]
#[command(name = "cdcm", version, about = "Canonical dynamic causal modeling")]
struct Cli {
    /// Require an explicit --seed for simulate, fit and group.
    #[arg(long, global = true)]
    strict: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate BOLD data from a known model.
    Simulate(simulate::SimulateArgs),
    /// Audit a stimulus design (and optionally a model) for identifiability.
    CheckDesign(check::CheckArgs),
    /// Sample a subject's posterior with NUTS.
    Fit(fit::FitArgs),
    /// Recover parameters constructively from a noiseless trajectory.
    Recover(recover::RecoverArgs),
    /// Fit the hierarchical group model to subject summaries.
    Group(group::GroupArgs),
    /// Summarize posterior draws.
    Summarize(fit::SummarizeArgs),
    /// Time the analytic trajectory against the Runge-Kutta oracle.
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate::run(a, cli.strict),
        Command::CheckDesign(a) => check::run(a),
        Command::Fit(a) => fit::run(a, cli.strict),
        Command::Recover(a) => recover::run(a),
        Command::Group(a) => group::run(a, cli.strict),
        Command::Summarize(a) => fit::summarize_run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(2),
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Row-major nested vectors for JSON output.
pub fn rows(m: &cdcm::linalg::Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Prints to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

pub fn emit_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    emit(&serde_json::to_string_pretty(value).map_err(|e| CliError::User(e.to_string()))?);
    Ok(())
}
