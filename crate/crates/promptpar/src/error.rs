//! Crate-wide error type.
//!
//! The CLI maps variants onto process exit codes: configuration problems
//! exit 2, parameter-audit failures exit 3, data/ingestion problems exit 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("unmapped attribute: no schema entry for {0:?}")]
    UnmappedAttribute(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("audit failure: {0}")]
    Audit(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("ingestion error for {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 2,
            Error::Audit(_) => 3,
            Error::Ingestion { .. } | Error::Data(_) | Error::Split(_) => 4,
            _ => 1,
        }
    }
}
