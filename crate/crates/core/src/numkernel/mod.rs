//! Dense `f64` kernel: matrices, reverse-mode differentiation over a small op
//! set, and an Adam optimiser.

mod adam;
pub mod check;
mod graph;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use graph::{Gradients, Graph, Segment, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
