//! Minimal reverse-mode differentiation and dense kernels.
//!
//! All arithmetic is `f64` in a fixed row-major summation order, so every
//! computation is deterministic for identical inputs.

mod functional;
mod graph;
pub mod gradcheck;
mod optim;
mod tensor;

pub use functional::{
    argmax, cross_entropy, entropy, info_nce, kl_divergence, log_softmax, log_softmax_rows,
    logsumexp, mean_pool, softmax,
};
pub use graph::{Graph, Var};
pub use optim::{Adam, OptConfig};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
