use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("shape spec leaves the [-0.9, 0.9] cube: {0}")]
    ShapeOutOfBounds(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("grid has no zero crossing; surface is empty")]
    EmptySurface,

    #[error("token map still contains [MASK] at position {position}")]
    UnresolvedMask { position: usize },

    #[error("state {state} is unreachable from the clean token at t={t}")]
    InconsistentState { state: usize, t: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
