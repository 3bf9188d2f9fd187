//! Minimal dense autodiff: tensors, a reverse-mode tape, parameter storage,
//! Adam and a binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{softplus, Gradients, Graph, TargetClouds, Unary, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
