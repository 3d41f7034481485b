//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    CorpusParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty hidden states")]
    EmptyStates,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("discriminator parameters must be frozen for {0}")]
    FreezeContract(String),

    #[error("meta-task labelled domain {task:?} contains a record from domain {found:?}")]
    ImpureTask { task: String, found: String },

    #[error("{0}")]
    SplitViolation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged during {stage} at epoch {epoch}; parameters rolled back to last finite state")]
    Diverged { stage: String, epoch: usize },

    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("classifier training needs at least two classes, got {0}")]
    SingleClass(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing data for strategy: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
