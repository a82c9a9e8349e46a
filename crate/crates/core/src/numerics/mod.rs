//! Dense 64-bit tensors and a small reverse-mode autodiff engine.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
