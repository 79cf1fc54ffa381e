use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid heightmap: {0}")]
    InvalidHeightmap(String),

    #[error("query x = {x} outside terrain range [{min}, {max}]")]
    OutOfRange { x: f64, min: f64, max: f64 },

    #[error("singular system in {0}")]
    Singular(&'static str),

    #[error("invalid action {raw:?}: {reason}")]
    InvalidAction { raw: [u8; 5], reason: String },

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("factorization failed after jitter escalation")]
    Factorization,

    #[error("config error: {0}")]
    Config(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
