use std::path::PathBuf;
use thiserror::Error;

/// Error type shared across the workspace.
///
/// The variants double as the machine-parsable categories the CLI prints on
/// failure, so keep them coarse: what a caller can act on, not where the
/// error was raised.
#[derive(Debug, Error)]
pub enum MifError {
    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: {0}")]
    Format(String),

    #[error("computation: {0}")]
    Computation(String),

    #[error("numeric: {0}")]
    Numeric(String),
}

impl MifError {
    /// Stable category token, one word, used by the CLI error line and exit code.
    pub fn category(&self) -> &'static str {
        match self {
            MifError::Validation(_) => "validation",
            MifError::Config(_) => "config",
            MifError::Io { .. } | MifError::Format(_) => "io",
            MifError::Computation(_) => "computation",
            MifError::Numeric(_) => "numeric",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MifError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, MifError>;

/// Shorthand for `MifError::Validation` with format args.
#[macro_export]
macro_rules! validation {
    ($($arg:tt)*) => {
        $crate::error::MifError::Validation(format!($($arg)*))
    };
}
