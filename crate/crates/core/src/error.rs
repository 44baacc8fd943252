//! Error types shared across the pipeline.

use thiserror::Error;

/// Coarse classification used by the CLI to pick an exit code:
/// configuration/input problems exit 1, failures at runtime exit 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("label join failed: missing window ids {missing:?}, unmatched label ids {extra:?}")]
    LabelJoin { missing: Vec<u64>, extra: Vec<u64> },

    #[error("unknown subsystem id '{0}'")]
    UnknownSubsystem(String),

    #[error("unknown signal id '{0}'")]
    UnknownSignal(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("labels contain a single class; best-F1 thresholding needs both")]
    SingleClassLabels,

    #[error("no threshold available for subsystem '{0}'")]
    MissingThreshold(String),

    #[error("degenerate {what}")]
    Degenerate { what: String },

    #[error("training diverged at epoch {epoch}: {term} became non-finite")]
    Divergence { epoch: usize, term: String },

    #[error("hyperparameter grid is empty")]
    EmptyGrid,

    #[error("unsupported grid key '{0}'")]
    UnknownGridKey(String),

    #[error("score group is empty: {0}")]
    EmptyGroup(String),

    #[error("checkpoint does not match request: {0}")]
    CheckpointMismatch(String),

    #[error("model kind mismatch: expected {expected}, checkpoint holds {got}")]
    KindMismatch { expected: String, got: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_)
            | CoreError::Schema { .. }
            | CoreError::LabelJoin { .. }
            | CoreError::UnknownSubsystem(_)
            | CoreError::UnknownSignal(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::SingleClassLabels
            | CoreError::MissingThreshold(_)
            | CoreError::EmptyGrid
            | CoreError::UnknownGridKey(_)
            | CoreError::EmptyGroup(_)
            | CoreError::CheckpointMismatch(_)
            | CoreError::KindMismatch { .. } => ErrorClass::Validation,
            CoreError::NonFinite { .. }
            | CoreError::Degenerate { .. }
            | CoreError::Divergence { .. }
            | CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::Csv(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
