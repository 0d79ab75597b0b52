use std::path::PathBuf;

use crate::data::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("report/label alignment: {0}")]
    Alignment(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Parse { .. } | Error::Validation(_) | Error::UnknownAgent(_) => 3,
            Error::Config(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Divergence { .. } | Error::NonFinite(_) => 6,
            Error::Calibration(_) => 7,
            Error::Alignment(_) | Error::UndefinedMetric(_) => 8,
            Error::Generation(_) => 9,
            Error::Shape { .. } => 10,
        }
    }
}
