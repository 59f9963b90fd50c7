//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Only first derivatives are supported. The primitive set is exactly what the
//! transformer backbone and the mixture-of-experts block consume.

mod kernels;
mod tape;
mod tensor;

pub use tape::{AttentionDims, Tape, Var};
pub use tensor::Tensor;
