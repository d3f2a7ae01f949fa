//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! The op set is what a pre-LN transformer needs (matmul, bias add,
//! layernorm, softmax, GELU, embedding lookup, dropout, fused multi-head
//! attention, cross-entropy) plus the two row operations that token dropping
//! is built from: [`Graph::gather_rows`] and [`Graph::combine_rows`].

mod graph;
mod param;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid index: {0}")]
    Index(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("no target positions to average over")]
    EmptyTargets,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
