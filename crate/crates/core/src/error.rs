use thiserror::Error;

/// Errors produced anywhere in the inference, quantization and metrics stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },

    #[error("color space error: expected {expected}, found {found}")]
    Space { expected: String, found: String },

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("weight load error in tensor `{tensor}` at byte {offset}: {reason}")]
    Load {
        tensor: String,
        offset: usize,
        reason: String,
    },

    #[error("invalid score set: {0}")]
    Scores(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by the filesystem rather than by data content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
