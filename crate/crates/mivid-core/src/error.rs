//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any mivid operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or report content could not be read, decoded, or matched.
    #[error("data error: {0}")]
    Data(String),

    /// Diffusion timestep outside the valid range of the schedule.
    #[error("step error: {0}")]
    Step(String),

    /// Tensor shapes inconsistent with the model configuration.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value encountered where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Metric preconditions violated (e.g. frame smaller than the window).
    #[error("metric error: {0}")]
    Metric(String),

    /// Checkpoint file invalid, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
