//! Deterministic tensor math with reverse-mode automatic differentiation.

mod adam;
mod graph;
pub mod kernels;
mod mask;
mod scalar;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use mask::{AttentionMask, VisibleRows};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
