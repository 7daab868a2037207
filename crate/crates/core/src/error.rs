use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{param}`; step aborted")]
    NonFiniteGradient { param: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("cannot decode genotype: {0}")]
    Decode(String),

    #[error("dataset file {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
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

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Contract(_) | Error::Config(_) | Error::Genotype(_) | Error::Format { .. }
        )
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
