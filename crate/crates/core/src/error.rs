use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A precondition the caller is responsible for was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("evaluation failed on image {image}: {msg}")]
    Evaluation { image: String, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short category name, used for CLI exit codes and service error bodies.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Contract(_) => "contract",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::Ingestion(_) => "ingestion",
            Error::Evaluation { .. } => "evaluation",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Io(_) => "io",
        }
    }
}
