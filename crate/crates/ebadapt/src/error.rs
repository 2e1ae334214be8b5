use std::path::{Path, PathBuf};

use ebadapt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or inconsistent input, located by file and record.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Core { source, .. } => match source {
                CoreError::Diverged { .. } | CoreError::NonFinite { .. } => 3,
                CoreError::Config(_) | CoreError::SchemeMismatch { .. } | CoreError::UnknownRelationship(_) => 1,
                _ => 2,
            },
        }
    }
}

/// Attaches a context string (usually a file name) to core errors.
pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, CoreError> {
    fn context(self, what: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| Error::Core {
            context: what.to_string(),
            source,
        })
    }
}
