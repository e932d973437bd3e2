//! Minimal CPU neural-network toolkit: dense tensors, a tape-based autodiff
//! [`Graph`], a handful of layers, and Adam.
//!
//! Batch-level loops (convolutions over the batch axis) run through
//! [`Parallelism`], which uses rayon when the `parallel` feature is enabled
//! and a plain loop otherwise. Reductions are always combined in index order,
//! so results are bit-identical across both paths.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use graph::{concat_cols, softmax_rows, Gradients, Graph, Var};
pub use layers::{AdditiveAttention, BatchNorm, Conv2d, ForwardCtx, Linear, Lstm};
pub use optim::{Adam, AdamConfig};
pub use par::Parallelism;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight file: {0}")]
    Format(String),
}
