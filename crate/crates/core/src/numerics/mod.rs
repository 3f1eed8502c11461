//! Dense tensors, a reverse-mode tape, the adaptive-moment optimizer and the
//! `NVCK` checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
pub(crate) mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{same_padding, BatchStats, Gradients, Graph, Mode, NodeId, Pad2d};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
