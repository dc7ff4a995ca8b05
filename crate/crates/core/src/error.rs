use std::path::PathBuf;

use beamfuse_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config: {0}")]
    Config(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Self::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// Process exit status: 2 config, 3 I/O, 4 numeric, 5 consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Generation(_) => 2,
            Self::Io { .. } | Self::Format { .. } => 3,
            Self::Data(_) | Self::Numeric(_) => 4,
            Self::Consistency(_) => 5,
            Self::Numerics(NumericsError::Io(_) | NumericsError::Checkpoint(_)) => 3,
            Self::Numerics(NumericsError::Config(_)) => 2,
            Self::Numerics(_) => 4,
        }
    }
}
