use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by how a frontend should react: data problems,
/// configuration problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("{source_name}:{line}: interaction references unknown video `{video_id}`")]
    UnknownVideo {
        source_name: String,
        line: u64,
        video_id: String,
    },

    #[error("{source_name}:{line}: interaction references unknown user `{user_id}`")]
    UnknownUser {
        source_name: String,
        line: u64,
        user_id: String,
    },

    #[error("video `{video_id}` has non-positive length {length}")]
    InvalidLength { video_id: String, length: f64 },

    #[error("length {length} is outside the group scheme (0, {max}]")]
    LengthOutOfRange { length: f64, max: f64 },

    #[error("group {group} contains no training interactions")]
    EmptyGroup { group: usize },

    #[error("invalid configuration `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("unknown {kind} index {index} (vocabulary size {size})")]
    UnknownId {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("score normalization is degenerate: all {0} scores are equal")]
    DegenerateScores(usize),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Broad classification used by frontends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig { .. } => ErrorKind::Usage,
            Error::NonFinite(_) | Error::DegenerateScores(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
