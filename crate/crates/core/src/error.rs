use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced at layer {layer} ({context})")]
    NumericFailure { layer: usize, context: String },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("operation {0} does not support this usage")]
    Unsupported(&'static str),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("training diverged during {stage}: {source}")]
    Divergence {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sparsity checkpoint {requested:.4} not found; nearest available: {nearest:?}")]
    MissingCheckpoint { requested: f64, nearest: Vec<f64> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn diverged(stage: impl Into<String>, source: Error) -> Self {
        Error::Divergence {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// True when the error (or the one it wraps) is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFailure { .. } => true,
            Error::Divergence { .. } => true,
            _ => false,
        }
    }
}
