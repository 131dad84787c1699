use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown dataset kind: {0}")]
    UnknownDatasetKind(String),

    #[error("split file parse error at line {line}: {message}")]
    SplitParse { line: usize, message: String },

    #[error("idx archive error: {0}")]
    IdxFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteStep { step: u64 },

    #[error("non-finite loss at step {step}; diagnostic checkpoint at {}", .checkpoint.display())]
    NonFiniteLoss { step: u64, checkpoint: PathBuf },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
