use std::path::Path;

use r2a_core::agent::AgentError;
use thiserror::Error;

use crate::dataset::DataError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad metrics file: {0}")]
    Metrics(String),
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Agent(AgentError::Config(_)) => 1,
            HarnessError::Agent(AgentError::NonFiniteLoss { .. } | AgentError::Tensor(_)) => 3,
            HarnessError::Agent(AgentError::MissingRetrieval(_)) => 2,
            HarnessError::Data(_) | HarnessError::Io { .. } | HarnessError::Checkpoint(_) | HarnessError::Metrics(_) => 2,
        }
    }
}
