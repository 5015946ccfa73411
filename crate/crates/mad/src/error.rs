//! Error types shared across the toolkit.
//!
//! Every error carries a kind that maps onto the CLI exit-code convention:
//! configuration errors exit 2, data errors 3, numeric errors 4, I/O errors 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MadError {
    /// Bad configuration: unknown enum value, invalid hyperparameter, missing extra key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data: label out of range, empty set, shape mismatch.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN/Inf loss or gradient, diverged training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Attack is registered in the table but intentionally not implemented.
    #[error("attack id {id} ({name}) is registered but not implemented")]
    NotImplemented { id: u32, name: String },

    /// On-disk artifact failed validation (checksum, recomputed metric, invariant).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint or manifest written by an incompatible format version.
    #[error("version error: expected format version {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("I/O error: {0}")]
    Io(String),

    /// Sampling could not satisfy the requested quota.
    #[error("sampling error: {0}")]
    Sampling(String),
}

impl From<std::io::Error> for MadError {
    fn from(e: std::io::Error) -> Self {
        MadError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for MadError {
    fn from(e: serde_json::Error) -> Self {
        MadError::Io(format!("json: {e}"))
    }
}

impl MadError {
    /// CLI exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            MadError::Config(_) | MadError::NotImplemented { .. } => 2,
            MadError::Data(_) | MadError::Sampling(_) => 3,
            MadError::Numeric(_) => 4,
            MadError::Io(_) | MadError::Integrity(_) | MadError::Version { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, MadError>;
