use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside of its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A config file line could not be parsed.
    #[error("{path}:{line}: {message}")]
    ConfigParse { path: String, line: usize, message: String },

    /// A non-finite value showed up during training.
    #[error("non-finite {what} at update {update} (env step {env_step})")]
    NonFinite { what: String, update: u64, env_step: u64 },

    /// A model produced NaN or infinite outputs.
    #[error("non-finite {0}")]
    NonFiniteOutput(&'static str),

    /// Checkpoint archive is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Telemetry files are missing or malformed. One entry per problem.
    #[error("telemetry errors:\n{}", .0.join("\n"))]
    Telemetry(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
