//! Command implementations behind the `refn` binary.
//!
//! Exit codes: 0 success, 1 configuration error or failed validation,
//! 2 unreadable input (rules, specs, records, captures) or bad usage,
//! 3 training error.

pub mod commands;
pub mod config;
pub mod generation;

use std::path::PathBuf;

use refn_core::dataset::DatasetError;
use refn_core::grpo::GrpoError;
use refn_core::task::TaskError;
use refn_core::validator::{FuzzError, SpecError};
use refn_core::RuleSetError;
use thiserror::Error;

pub use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {error}")]
    Rules { path: PathBuf, error: RuleSetError },
    #[error("{path}: {error}")]
    Spec { path: PathBuf, error: SpecError },
    #[error("two records are named {0:?}")]
    DuplicateRecord(String),
    #[error("no records in {0}")]
    NoRecords(PathBuf),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error("training failed: {0}")]
    Train(#[from] GrpoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Train(_) => 3,
            _ => 2,
        }
    }
}
