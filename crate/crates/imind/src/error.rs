use std::io;
use std::path::{Path, PathBuf};

use imind_core::Error as CoreError;
use thiserror::Error;

/// Process exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        match self {
            CliError::Usage(_) | CliError::Config(_) => ExitKind::Usage,
            CliError::Core(e) => match e {
                CoreError::Config(_) => ExitKind::Usage,
                CoreError::Numerical(_) => ExitKind::Numerical,
                _ => ExitKind::Data,
            },
            CliError::Io { .. } | CliError::Data(_) | CliError::Json(_) | CliError::Csv(_) => {
                ExitKind::Data
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.exit_kind() as i32
    }
}
