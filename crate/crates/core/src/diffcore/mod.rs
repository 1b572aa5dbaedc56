//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId, OpKind};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{BindMode, Param, ParameterSet};
pub use tensor::Tensor;
