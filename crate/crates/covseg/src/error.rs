//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad channel count, weight list length, ...).
    #[error("invalid config: {0}")]
    Config(String),
    /// Tensor shape violates an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Dataset or image file problem.
    #[error("data error: {0}")]
    Data(String),
    /// Checkpoint archive problem (bad magic, version, missing weight, config mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training-time failure (divergence, empty split).
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
