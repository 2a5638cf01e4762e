//! ELNet: a slice-wise convolutional classifier for multi-slice image
//! volumes, built on a small reverse-mode differentiation engine.

pub mod blurpool;
pub mod data;
pub mod error;
pub mod model;
pub mod msnorm;
pub mod saliency;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Checkpoint, ElNet, ForwardOptions, ModelConfig, PoolVariant};
pub use msnorm::NormVariant;
pub use tensor::{Graph, Init, Real, Shape, Tensor, Var};
