use std::path::PathBuf;

use ecocruise_core::{DpError, InverseError, NnError, RoadError, SimError, VehicleError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Self::Parse { path: path.into(), line, msg: msg.into() }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage { stage, source: Box::new(self) }
    }

    /// Process exit status: 1 usage, 2 bad input or configuration, 3 runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(_) | Self::Parse { .. } | Self::Road(_) => 2,
            Self::Vehicle(VehicleError::InvalidParams(_)) => 2,
            Self::Dp(DpError::InvalidConfig(_)) => 2,
            Self::Nn(NnError::InvalidConfig(_)) => 2,
            Self::Sim(SimError::InvalidController(_) | SimError::MissingArtifact(_)) => 2,
            Self::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
