use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The CLI maps each onto a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Upstream,
    Data,
    Evaluation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("zero vector: cosine similarity is undefined")]
    ZeroVector,

    #[error("similarity cell (row {row}, column {col}): {source}")]
    AtCell {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("upstream returned HTTP {status}: {body}")]
    UpstreamStatus { status: u16, body: String },

    #[error("could not parse reply: {message}")]
    Parse { message: String, raw: String },

    #[error("generation incomplete: no prompts parsed for class {class:?}")]
    GenerationIncomplete { class: String, raw: String },

    #[error("embedding provider inconsistency: {0}")]
    ProviderInconsistency(String),

    #[error("{}", match line { Some(l) => format!("embedding file line {l}: {message}"), None => format!("embedding file: {message}") })]
    EmbeddingFormat {
        line: Option<usize>,
        message: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {message}")]
    DataFile { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data_file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::DataFile {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Transport { .. }
            | Error::UpstreamStatus { .. }
            | Error::GenerationIncomplete { .. }
            | Error::ProviderInconsistency(_) => ErrorCategory::Upstream,
            Error::UndefinedMetric(_) => ErrorCategory::Evaluation,
            Error::AtCell { source, .. } => source.category(),
            _ => ErrorCategory::Data,
        }
    }

    /// Whether a fresh request might succeed where this one failed.
    pub fn is_retriable(&self) -> bool {
        match self {
            Error::Transport { .. } => true,
            Error::UpstreamStatus { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
