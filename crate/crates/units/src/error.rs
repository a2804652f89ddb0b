use std::path::{Path, PathBuf};

pub type Result<T, E = UnitsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum UnitsError {
    #[error(transparent)]
    Core(#[from] units_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed CSV content; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl UnitsError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        UnitsError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, line: u64, message: impl Into<String>) -> Self {
        UnitsError::Csv {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// Process exit status: 2 for bad invocations and configs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            UnitsError::Usage(_) | UnitsError::Toml { .. } | UnitsError::Core(units_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
