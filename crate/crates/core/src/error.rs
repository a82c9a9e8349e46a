use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants are grouped by how the command-line front end maps them to
/// process exit codes, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {what} has {left} vs {right} lines")]
    Alignment { what: String, left: usize, right: usize },

    #[error("decode error in {path}: invalid UTF-8 on line {line}")]
    Decode { path: PathBuf, line: usize },

    #[error("size error: requested {requested} items from a collection of {available}")]
    Size { requested: usize, available: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("length error: sequence of {len} exceeds the limit of {limit}")]
    Length { len: usize, limit: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("fixture verification failed: {0}")]
    Fixture(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct ways a checkpoint file can fail to load.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("payload digest mismatch: header says {expected}, payload hashes to {found}")]
    Digest { expected: String, found: String },
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for usage/configuration problems, 3 for numerical
    /// divergence, 2 for every data-level failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
