//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric operation produced or received a non-finite value, or hit a
    /// degenerate direction (e.g. a zero-norm weight column under cosine
    /// normalization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration (counts, shapes of the experiment, presets).
    #[error("config error: {0}")]
    Config(String),

    /// Synthetic data generation failed (e.g. rejection sampling exhausted).
    #[error("generation error: {0}")]
    Gen(String),

    /// A file did not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// A file contained no samples.
    #[error("empty input: {0}")]
    Empty(String),

    /// Tensor/vector dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A label fell outside the block it must belong to.
    #[error("label error: {0}")]
    Label(String),

    /// A metric is undefined for the given inputs (zero denominator).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
