use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] igdm_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Configuration problems map to exit code 1, everything else to 2.
    pub fn is_config(&self) -> bool {
        matches!(self, LabError::Config(_) | LabError::Core(igdm_core::Error::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
