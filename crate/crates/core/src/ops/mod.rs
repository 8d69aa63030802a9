//! Forward and backward kernels on plain tensors.
//!
//! Every kernel here is pure; [`crate::autograd::Tape`] records calls to them
//! and replays the matching backward kernels.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::{
    bce_with_logits, bce_with_logits_backward, concat_channels, linear, linear_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, split_channels,
};
pub use conv::{conv2d, conv2d_backward, out_extent, Conv2dGrads, ConvGeometry};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNormParams, BatchNormSaved, RunningStats};
pub use pool::{pool2d, pool2d_backward, pool2d_with_indices, PoolMode, PoolOutput, PoolSpec};
