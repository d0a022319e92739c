//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation together with a closure computing the
//! vector-Jacobian product. Convolutions lower to im2col + GEMM and attention
//! is a single fused op with optional additive bias and pair masks.

mod gemm;
mod graph;
pub mod gradcheck;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, GraphStats, Var};
pub use ops::{gather_tensor, AttentionSpec, PairMask, GATHER_ZERO};
pub use tensor::Tensor;
