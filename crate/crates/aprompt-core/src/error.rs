//! Crate-wide error type.

use std::path::PathBuf;

use crate::matching::LossBreakdown;

/// Errors produced by dataset, model, and evaluation code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (widths, thresholds, ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image shape violates an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid argument outside configuration (labels, counts, bounds).
    #[error("argument error: {0}")]
    Argument(String),

    /// Scene placement failed after the bounded rejection budget.
    #[error("scene generation failed for seed {seed}: {message}")]
    Generation { seed: u64, message: String },

    /// A dataset file is missing or does not parse.
    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    /// Dataset metadata disagrees with scene contents.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {breakdown}")]
    Divergence { step: usize, breakdown: LossBreakdown },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
