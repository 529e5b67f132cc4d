use thiserror::Error;

/// Errors produced anywhere in the avatar pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion has zero norm")]
    InvalidQuaternion,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("gaussian culled behind camera (z = {z})")]
    CulledBehindCamera { z: f64 },
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("insufficient anchors: need {needed}, found {found}")]
    InsufficientAnchors { needed: usize, found: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("corrupt asset ({field}): {reason}")]
    CorruptAsset { field: String, reason: String },
    #[error("image codec: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn corrupt(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::CorruptAsset {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
