use std::path::Path;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fusdom_core::Error),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("report error: {0}")]
    Report(String),

    #[error("schema version mismatch in {path}: found {found}, expected {expected}")]
    SchemaVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
