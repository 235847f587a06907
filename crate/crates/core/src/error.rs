use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    /// A record is well-formed JSON but violates the corpus schema.
    #[error("invalid record for patient `{patient_id}`: {message}")]
    Record { patient_id: String, message: String },

    #[error("corpus exhausted: no patients survive filtering")]
    CorpusExhausted,

    #[error("hierarchy contains a cycle: {}", .0.join(" -> "))]
    HierarchyCycle(Vec<String>),

    #[error("index {index} out of bounds for {what} of size {len}")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
