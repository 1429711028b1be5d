use std::path::PathBuf;

use sccam_core::data::DataError;
use sccam_core::explain::ExplainError;
use sccam_core::model::ModelError;
use sccam_core::train::TrainError;
use thiserror::Error;

/// Failures, grouped by exit code: 1 internal, 2 configuration or path,
/// 3 data domain.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Internal(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Path { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Internal(_) => 1,
            Self::Config(_) | Self::Path { .. } => 2,
            Self::Data(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => Self::Path { path, message: source.to_string() },
            DataError::Config(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => Self::Config(m),
            ModelError::Numerics(n) => Self::Internal(n.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(m) => Self::Config(m),
            e @ TrainError::Diverged { .. } => Self::Internal(e.to_string()),
            e @ (TrainError::MissingClass { .. } | TrainError::EmptyTestSet) => Self::Data(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            ExplainError::Io { path, source } => Self::Path { path, message: source.to_string() },
            other => Self::Data(other.to_string()),
        }
    }
}
