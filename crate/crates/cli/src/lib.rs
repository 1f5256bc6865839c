//! Command-line front end: scoring, ranking, search, correlation reports,
//! enumeration and synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 malformed input
//! or I/O failure, 3 computation failure.

pub mod batch_file;
mod commands;
pub mod config;
mod output;

use std::ffi::OsString;

use thiserror::Error;

pub use commands::run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Compute(_) => 3,
        }
    }
}

impl From<croze_core::Error> for CliError {
    fn from(e: croze_core::Error) -> Self {
        match e {
            croze_core::Error::Config(_) => CliError::Usage(e.to_string()),
            e if e.is_input_error() => CliError::Input(e.to_string()),
            e => CliError::Compute(e.to_string()),
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
