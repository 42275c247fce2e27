use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CastError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CastError {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("video has no frames")]
    EmptyVideo,

    #[error("format error: {0}")]
    FormatError(String),

    #[error("artifact region {0} does not fit inside the frame")]
    InvalidRegion(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("cannot evaluate an empty score set")]
    EmptyEval,

    #[error("ROC is undefined with a single class ({positives} positives, {negatives} negatives)")]
    DegenerateEval { positives: usize, negatives: usize },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("variant `{0}` does not produce a cross-attention matrix")]
    UnsupportedVariant(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CastError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CastError::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CastError::FormatError(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CastError::ConfigError(msg.into())
    }
}
