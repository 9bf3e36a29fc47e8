use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, template or class set.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violated an operation's precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("ingestion error in {path} at record {record}: {message}")]
    Ingest {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("unknown dataset `{id}` (known: {})", known.join(", "))]
    UnknownDataset { id: String, known: Vec<String> },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("class `{0}` has no in-vocabulary unigram")]
    UnmaskableClass(String),

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("storage error: {0}")]
    Storage(String),

    /// Internal cross-reference failure, e.g. a pseudo-label pointing at a missing example.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("degenerate result: {0}")]
    Degenerate(String),

    #[error("run directory {path} is locked by {holder}")]
    Locked { path: PathBuf, holder: String },

    #[error("cannot resume run: {0}")]
    ResumeMismatch(String),

    #[error("scoring failed for example `{id}`: {source}")]
    Scoring {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input or configuration rather than
    /// an internal failure.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Ingest { .. }
            | Error::UnknownDataset { .. }
            | Error::Parse { .. }
            | Error::UnmaskableClass(_)
            | Error::Locked { .. }
            | Error::ResumeMismatch(_)
            | Error::Io { .. }
            | Error::Json(_) => true,
            Error::Scoring { source, .. } => source.is_user_error(),
            _ => false,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Ingest { .. } => "ingest",
            Error::UnknownDataset { .. } => "unknown_dataset",
            Error::Parse { .. } => "parse",
            Error::UnmaskableClass(_) => "unmaskable_class",
            Error::Transport(_) => "transport",
            Error::Storage(_) => "storage",
            Error::Consistency(_) => "consistency",
            Error::Degenerate(_) => "degenerate",
            Error::Locked { .. } => "locked",
            Error::ResumeMismatch(_) => "resume_mismatch",
            Error::Scoring { .. } => "scoring",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
