//! Error types shared across the library.

use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type.
///
/// The CLI maps variants to exit codes: configuration errors exit 2, numeric
/// failures exit 3, missing artifacts exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training aborted at iteration {iteration}: non-finite loss")]
    TrainingAborted { iteration: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }
}
