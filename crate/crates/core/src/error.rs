use std::path::PathBuf;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Decode {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("passage id `{0}` appears twice with differing text")]
    DuplicateId(String),

    #[error("query `{query}`: gold passage `{gold}` is not in the corpus")]
    UnresolvedGold { query: String, gold: String },

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("passage `{0}` has no embedding")]
    NotEmbedded(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("could not parse model output: {0}")]
    ModelOutput(String),

    #[error("unsupported trace schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("no trace for queries: {}", .0.join(", "))]
    MissingTraces(Vec<String>),

    #[error("query id sets differ (left only: {left_only:?}, right only: {right_only:?})")]
    IdMismatch {
        left_only: Vec<String>,
        right_only: Vec<String>,
    },

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
