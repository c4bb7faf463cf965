//! Scenario-driven front end: configuration files, excitations, transient
//! runs and result files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod excitation;
pub mod output;
pub mod run;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed scenario file: {0}")]
    Syntax(String),
    #[error("missing required keys: {0}")]
    Missing(String),
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}
