//! Error type shared across the crate.
//!
//! Variants are grouped into three classes that the CLI maps onto exit
//! codes: usage (bad flags/config), data (missing or malformed inputs),
//! and numeric (non-finite values, degenerate inputs to numeric routines).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration file or flag combination is invalid.
    #[error("config: {0}")]
    Config(String),

    /// An input file or directory is missing or cannot be read/written.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An input file exists but its contents do not parse or fail validation.
    #[error("format: {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Inputs violate an operation's contract (wrong shape, empty set, out
    /// of range) in a way that stems from data rather than code.
    #[error("{0}")]
    Invalid(String),

    /// A numeric routine hit a non-finite value or a degenerate input.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A remote call (vision-language or embedding service) failed.
    #[error("remote: {0}")]
    Remote(String),

    /// Wraps an error with the pipeline stage it occurred in.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Exit-code class for the CLI: usage errors exit 1, data errors 2,
/// numeric errors 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Tags an error with the grounding-pipeline stage it came from.
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage { stage, source: Box::new(source) }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Io { .. } | Error::Format { .. } | Error::Invalid(_) | Error::Remote(_) => {
                ErrorClass::Data
            }
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
        }
    }
}
