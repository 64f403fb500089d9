//! Library side of the `corrlab` binary: configuration, the five commands,
//! and the gradient-check suite.

pub mod commands;
pub mod config;
pub mod gradcheck;
mod log;

use std::io::Write;

pub use config::{Precision, RunConfig, Split};
pub use log::Logger;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<corrlab_core::Error> for CliError {
    fn from(e: corrlab_core::Error) -> Self {
        use corrlab_core::Error as E;
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            E::Io(_) | E::Parse { .. } => CliError::Io(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Ablate,
    Gradcheck,
}

/// Runs one command, writing its console report to `out`.
pub fn run(command: Command, config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    config.validate()?;
    match command {
        Command::Generate => commands::generate(config, out).map(drop),
        Command::Train => commands::train(config, out).map(drop),
        Command::Eval => commands::eval(config, out).map(drop),
        Command::Ablate => commands::ablate(config, out).map(drop),
        Command::Gradcheck => {
            let report = gradcheck::run_suite(config.seed, out)?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Numeric(format!("gradient check failed: {}", report.failures().join(", "))))
            }
        }
    }
}
