use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the feature and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} out of range for a {order}-way tensor")]
    InvalidMode { mode: usize, order: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fit is undefined for a zero-norm tensor")]
    UndefinedFit,

    #[error("no class folders found under {0}")]
    NoClassesFound(PathBuf),

    #[error("class {class} has {count} samples, fewer than the {k} folds requested")]
    StratificationImpossible {
        class: usize,
        count: usize,
        k: usize,
    },

    #[error("class {0} is absent from the training fold")]
    MissingClass(usize),

    #[error("embedding file has {found} rows but the manifest has {expected} samples")]
    EmbeddingMismatch { expected: usize, found: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("label {label} is not below class count {classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("cannot compute metrics on an empty evaluation set")]
    EmptyEvaluation,

    #[error("invalid config: {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("test index {0} leaked into a training multiset")]
    Leakage(usize),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

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

    pub fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// True for failures of the filesystem rather than of the inputs' content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::NoClassesFound(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
