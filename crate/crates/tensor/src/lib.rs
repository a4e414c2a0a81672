//! Reverse-mode automatic differentiation over dense `(N, C, H, W)` tensors.
//!
//! The op set is deliberately narrow: it covers what an attention-gated
//! encoder-decoder with a pixel-shuffle head needs, plus the filtering and
//! reduction primitives used by SSIM-style losses. Everything runs in `f64`.

mod conv;
mod graph;
mod tensor;

pub use graph::{depth_to_space, sigmoid, space_to_depth, BatchNormStats, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
