//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{log_add, log_softmax_row, logsumexp, sigmoid, softmax_row, Graph, Var};
pub use tensor::Tensor;
