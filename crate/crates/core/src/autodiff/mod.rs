//! Reverse-mode automatic differentiation over dense `f64` tensors, and the
//! seedable random source used for pseudo quantization noise.
//!
//! The op set is deliberately small: enough to build an MLP, its loss, the
//! quantization step `1 / (2^b - 1)` and the sigmoid bit parametrization.
//! Apart from [`Tape::add_bias`], operands must have identical shapes.

mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
