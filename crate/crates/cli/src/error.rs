//! Error taxonomy mapped onto distinct process exit codes.

use std::fmt;

use sctforge::losses::LossError;
use sctforge::metrics::MetricsError;
use sctforge::model::{CheckpointError, ModelError};
use sctforge::phantom::PhantomError;
use sctforge::stats::StatsError;
use sctforge::training::TrainError;
use sctforge::volume::VolumeError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config file, invalid parameter combinations.
    Config(String),
    /// Missing or unreadable artifacts, filesystem refusals, corrupt files.
    Data(String),
    /// Divergence or non-finite values in numeric pipelines.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::BadSpec(_)
            | PhantomError::ShellDoesNotFit(_)
            | PhantomError::CohortTooSmall(_) => CliError::Config(e.to_string()),
            PhantomError::Manifest(_) | PhantomError::Volume(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            TrainError::Model(ModelError::Numerical(_)) => CliError::Numerical(e.to_string()),
            TrainError::Model(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } | TrainError::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Loss(LossError::BadConfig(_)) => CliError::Config(e.to_string()),
            TrainError::Metrics(MetricsError::ZeroVariance) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::DegenerateTest => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
