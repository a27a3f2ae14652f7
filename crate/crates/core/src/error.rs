use std::path::PathBuf;

use thiserror::Error;

use crate::training::TrainLog;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error in {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("b0 normalization failed: mean b0 <= 0 in {count} masked voxel(s)")]
    Normalization { count: usize },

    #[error("SH fit failed: {0}")]
    ShFit(String),

    #[error("tensor fit failed: {0}")]
    TensorFit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("optimizer step rejected: {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize, log: Box<TrainLog> },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::ShFit(_)
            | Error::TensorFit(_)
            | Error::NonFiniteGradient(_)
            | Error::Diverged { .. }
            | Error::Numerical(_)
            | Error::Autodiff(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for JSON error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Load { .. } => "load",
            Error::Invalid(_) => "invalid",
            Error::Shape(_) => "shape",
            Error::Normalization { .. } => "normalization",
            Error::ShFit(_) => "sh_fit",
            Error::TensorFit(_) => "tensor_fit",
            Error::Checkpoint(_) => "checkpoint",
            Error::Autodiff(_) => "autodiff",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::Numerical(_) => "numerical",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
