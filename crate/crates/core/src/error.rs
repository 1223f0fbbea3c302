//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A caller-supplied value is outside the accepted domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration (architecture, training, schedule) is inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Misuse of the autodiff tape, e.g. running backward twice.
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// A serialized artifact does not follow its format.
    #[error("malformed {format}: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
