//! Minimal tensor and reverse-mode autodiff engine used by every model here.

mod checkpoint;
mod graph;
mod kernels;
mod layers;
mod optim;
mod tensor;

pub use checkpoint::{write_atomic, Checkpoint, FORMAT_VERSION as CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{haar_forward, haar_inverse};
pub use layers::{Bound, Conv2d, Linear, ParamId, ParamStore};
pub use optim::Adam;
pub use tensor::Tensor;
