use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage needs an artifact an earlier stage did not produce.
    #[error("missing dependency {}: run `{stage}` first", path.display())]
    Dependency { path: PathBuf, stage: &'static str },

    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },

    #[error(transparent)]
    Core(#[from] eeml_core::Error),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Dependency { .. } => 3,
            HarnessError::Core(e) if e.is_numeric() => 4,
            HarnessError::Core(eeml_core::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}
