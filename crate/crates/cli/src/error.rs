use std::io::ErrorKind;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing inputs or conflicting settings.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] eend_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for usage, missing-file and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(eend_core::Error::Config(_)) => 2,
            CliError::Core(eend_core::Error::File { source, .. }) | CliError::Io { source, .. }
                if source.kind() == ErrorKind::NotFound =>
            {
                2
            }
            _ => 1,
        }
    }
}
