//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or index disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Index out of range for the requested structure.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration (model config, run config, episode parameters).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (corpus files, stats files, labels).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical invariant that must hold by construction was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Weight/feature container format problems (bad magic, truncation, shape mismatch).
    #[error("container format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Format(_) => 3,
            Error::Invariant(_) => 4,
            Error::Shape(_) | Error::NonFinite(_) | Error::Index(_) => 4,
        }
    }
}
