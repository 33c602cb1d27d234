//! Tensor arithmetic, reverse-mode gradients and the Adam update.

mod adam;
mod gemm;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{sigmoid, Activation, Gradients, LinearMap, MatrixMap, Tape, Var};
pub use tensor::Tensor;
