use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("schema error in {context}: {reason}")]
    Schema { context: String, reason: String },

    #[error("failed to load sample `{id}` from {path}: {reason}")]
    Load {
        id: String,
        path: PathBuf,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("network structure mismatch: {0}")]
    Structure(String),

    #[error("non-finite loss component `{component}` at epoch {epoch}")]
    NonFinite { component: String, epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing log file {0}")]
    MissingLog(PathBuf),

    #[error("no diagnostic labels available in {0}")]
    NoDiagnosticLabels(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (arguments, configs, schemas,
    /// run directories lacking what a report needs) rather than by a failure
    /// while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_)
                | Error::Config { .. }
                | Error::Schema { .. }
                | Error::Json(_)
                | Error::MissingLog(_)
                | Error::NoDiagnosticLabels(_)
        )
    }
}
