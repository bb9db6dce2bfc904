//! Minimal dense tensors with a reverse-mode gradient tape.
//!
//! Every tensor is an immutable, reference-counted value. Operations whose
//! inputs require gradients record a backward closure on the output, forming a
//! dynamic graph that [`Tensor::backward`] walks in reverse topological order.
//! Layout is NCHW row-major throughout and all values are `f64`.

mod autograd;
pub mod checkpoint;
mod conv;
pub mod dual;
mod elementwise;
mod error;
pub mod gradcheck;
pub mod init;
mod linalg;
mod loss;
mod norm;
mod reduce;
mod shape;
mod tensor;

pub use conv::{ConvSpec, PoolMode};
pub use dual::{Dual, Real};
pub use error::{Result, TensorError};
pub use norm::BatchStats;
pub use tensor::Tensor;
