use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// Dense materialization requested beyond the configured unknown cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("divergence detected: {0}")]
    Divergence(String),

    /// Hessian indefinite at the expansion point.
    #[error("saddle point: Hessian is not positive definite at the expansion point")]
    SaddlePoint,

    /// Hessian singular at the expansion point.
    #[error("degenerate Hessian: singular at the expansion point")]
    Degenerate,

    /// A VBA precision update lost positive definiteness even after jitter.
    #[error("vba step failed: {0}")]
    StepFailure(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pipeline stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
