//! Batch command-line surface over the `ctdense` library.
//!
//! Every command writes its result lines to a caller-supplied writer and
//! returns a [`CliError`] whose [`CliError::exit_code`] the binary uses.

pub mod commands;
pub mod config;

pub use commands::{cmd_curves, cmd_describe, cmd_evaluate, cmd_predict, cmd_synth, cmd_train, CurveOptions, DescribeOptions};
pub use config::RunConfig;

use ctdense::data::DataError;
use ctdense::train::TrainError;
use ctdense::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Divergence(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Self::Config(e.to_string()),
            e => Self::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::SplitBounds { .. } | DataError::BatchSize => Self::Config(e.to_string()),
            e => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::Divergence { .. } => Self::Divergence(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            e => Self::Data(e.to_string()),
        }
    }
}

pub(crate) fn io_error(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}
