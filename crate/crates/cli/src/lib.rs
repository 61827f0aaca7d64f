//! Operator entry points. Each subcommand resolves its flags into a plain
//! run struct and hands it to a `cmd_*` function, so tests can drive the
//! same code paths as the binary.

pub mod args;
mod commands;

use std::fmt::Display;

use thiserror::Error;

pub use commands::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{stage}: {detail}")]
    Data { stage: &'static str, detail: String },
    #[error("{stage}: numeric failure: {detail}")]
    Numeric { stage: &'static str, detail: String },
}

impl CliError {
    pub fn data(stage: &'static str, detail: impl Display) -> Self {
        CliError::Data {
            stage,
            detail: detail.to_string(),
        }
    }

    pub fn recsys(stage: &'static str, error: r2d2_core::recsys::RecsysError) -> Self {
        if error.is_numeric() {
            CliError::Numeric {
                stage,
                detail: error.to_string(),
            }
        } else {
            CliError::data(stage, error)
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Numeric { .. } => 3,
        }
    }
}
