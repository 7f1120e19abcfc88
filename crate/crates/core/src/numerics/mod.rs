//! Dense 2-D tensors, a small reverse-mode graph, and a finite-difference checker.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::finite_difference_check;
pub use graph::{Gradients, Graph, NodeId, Objective};
pub use kernels::{conv1d, matmul, sigmoid, ConvSpec};
pub use tensor::{dot, l2_norm, Tensor2D};

#[cfg(test)]
mod tests;
