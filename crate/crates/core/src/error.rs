use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate embedding: zero-norm feature vector cannot be normalized")]
    DegenerateEmbedding,

    #[error("empty positive set for anchor")]
    EmptyPositiveSet,

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Divergence {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("non-finite {0} encountered")]
    NonFinite(String),

    #[error("selective risk undefined: no sample has confidence >= {threshold}")]
    UndefinedRisk { threshold: f64 },

    #[error("degenerate classifier: classification layer norm is zero")]
    DegenerateClassifier,

    #[error("format error in {path} at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, suitable for machine parsing of CLI failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::DegenerateEmbedding => "degenerate-embedding",
            Error::EmptyPositiveSet => "empty-positive-set",
            Error::Divergence { .. } | Error::NonFinite(_) => "divergence",
            Error::UndefinedRisk { .. } => "undefined-risk",
            Error::DegenerateClassifier => "degenerate-classifier",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
