use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token id {token} for vocabulary of size {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("training diverged at step {step}: non-finite loss")]
    TrainingDiverged { step: u64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
