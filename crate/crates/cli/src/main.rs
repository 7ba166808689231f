use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod manifest;

use args::Cli;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] chanmap::Error),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    VerifyFailed(String),
    #[error("{0}")]
    CostMismatch(String),
    #[error("{0}")]
    RunFailed(String),
}

impl CliError {
    fn tag(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.tag(),
            CliError::Conflict(_) => "conflicting-flags",
            CliError::VerifyFailed(_) => "verify-failed",
            CliError::CostMismatch(_) => "cost-mismatch",
            CliError::RunFailed(_) => "run-failed",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.tag(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
