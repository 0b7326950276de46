use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrfpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrfpError {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        TrfpError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrfpError>;
