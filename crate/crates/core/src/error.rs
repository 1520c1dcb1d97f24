use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("invalid volume header in {}: {reason}", path.display())]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch in {}: expected {expected} bytes, found {found}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value in {}", .0.display())]
    NonFinite(PathBuf),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::ShapeMismatch(_)
                | Error::MissingFile(_)
                | Error::InvalidHeader { .. }
                | Error::SizeMismatch { .. }
                | Error::NonFinite(_)
                | Error::Version { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }

    /// Short stable identifier, used in machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::MissingFile(_) => "missing-file",
            Error::InvalidHeader { .. } => "invalid-header",
            Error::SizeMismatch { .. } => "size-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::NumericalFailure(_) => "numerical-failure",
            Error::InvalidLabel(_) => "invalid-label",
            Error::Version { .. } => "version",
            Error::Checkpoint(_) => "invalid-checkpoint",
            Error::TrainingAborted(_) => "training-aborted",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($fmt)+)));
        }
    };
}

macro_rules! ensure_shape {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::ShapeMismatch(format!($($fmt)+)));
        }
    };
}

pub(crate) use ensure_arg;
pub(crate) use ensure_shape;
