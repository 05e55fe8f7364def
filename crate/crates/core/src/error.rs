use std::path::PathBuf;

use softslot_numerics::NumericsError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after {0}")]
    EmptyDataset(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown item {0}")]
    UnknownItem(usize),

    #[error("context overflow: need {required} rows, model accepts {available}")]
    Overflow { required: usize, available: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite {term} at {context}")]
    NonFinite { term: String, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint {path}; run `{stage}` first")]
    MissingCheckpoint { path: PathBuf, stage: &'static str },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("frozen parameter modified or given a gradient: {0}")]
    FrozenViolation(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures a user fixes by changing configuration or running an
    /// earlier pipeline stage.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CoreError::Config(_) | CoreError::MissingCheckpoint { .. }
        )
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Serde(e.to_string())
    }
}
