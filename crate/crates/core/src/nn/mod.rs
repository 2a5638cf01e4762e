//! Network primitives with forward and backward rules.
//!
//! Every operation is a method on [`Graph`](crate::tensor::Graph) and treats
//! the leading axis of an `(S, C, H, W)` activation as the slice axis.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use activation::Mode;
pub use batchnorm::RunningStats;
pub use conv::conv_out_dim;
pub use linear::PROB_FLOOR;
