//! Differentiable model quantization: weights are trained under additive
//! pseudo quantization noise while per-group bitwidths are learned against
//! a model-size penalty, then rounded and packed into a compact file.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod diffq;
pub mod error;
pub mod harness;
pub mod optim;
pub mod quant;

pub use error::{Error, Result};
