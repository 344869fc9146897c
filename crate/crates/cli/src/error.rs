use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration; `field` is the dotted path of the offending key.
    #[error("config error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("could not parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: dprune::Error,
    },

    #[error("sweep child for seed {seed} exited with code {code}")]
    Child { seed: u64, code: i32 },
}

impl CliError {
    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        CliError::MissingArtifact {
            path: path.into(),
            hint: hint.into(),
        }
    }

    /// 2 config, 3 numeric failure, 4 missing dependency artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Parse { .. } => 2,
            CliError::MissingArtifact { .. } => 4,
            CliError::Child { code, .. } => *code,
            CliError::Core { source, .. } => match source {
                e if e.is_numeric() => 3,
                dprune::Error::Config(_) | dprune::Error::InvalidInput(_) => 2,
                dprune::Error::MissingCheckpoint { .. } | dprune::Error::Io { .. } => 4,
                _ => 1,
            },
        }
    }
}

/// Attaches a context string to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, dprune::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
