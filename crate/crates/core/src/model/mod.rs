//! DenseNet configuration, parameters, forward pass and checkpoints.

mod checkpoint;
mod config;
mod network;

use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    count_connections, feature_map_plan, weighted_layer_count, DenseNetConfig, PlanStage, StageKind,
    STEM_KERNEL, STEM_PADDING, STEM_POOL, STEM_STRIDE, TRANSITION_POOL,
};
pub use network::{
    probe_matches_plan, DenseNetModel, ForwardProbe, Layout, Param, ParamSpec, BN_EPS, BN_MOMENTUM,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {actual:?} does not match the configured {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated or has trailing bytes: {0}")]
    Truncated(String),
    #[error("checkpoint does not match the model layout: {0}")]
    Mismatch(String),
}
