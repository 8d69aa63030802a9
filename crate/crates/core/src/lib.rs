//! DenseNet-121/169 chest-CT classification built on a small reverse-mode
//! autodiff engine.

pub mod autograd;
pub mod data;
pub mod gradcheck;
pub mod mha;
pub mod model;
pub mod ops;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use autograd::{Eager, Recorder, Tape, Var};
pub use model::{DenseNetConfig, DenseNetModel, ModelError};
pub use tensor::{Element, Tensor, TensorError};
