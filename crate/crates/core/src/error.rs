use thiserror::Error;

use crate::train::TraceRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token id {id} is outside the vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("every position is masked out of the loss")]
    EmptyLoss,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("config digest mismatch (stored {stored}, expected {expected})")]
    DigestMismatch { stored: String, expected: String },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted {
        step: usize,
        reason: String,
        trace: Vec<TraceRow>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::TrainingAborted { .. })
    }
}
