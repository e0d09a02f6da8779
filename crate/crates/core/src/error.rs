use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:02x?}, found {found:02x?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("config error: {0}")]
    Config(String),

    /// Training-time numeric failure (diverged loss and the like).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
