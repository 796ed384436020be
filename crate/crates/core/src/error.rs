use std::path::PathBuf;

/// Errors produced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checksum mismatch in {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported container version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("could not partition data: {0}")]
    Partition(String),

    #[error("incomplete run directory {0}")]
    IncompleteRun(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
