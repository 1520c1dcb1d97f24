//! Minimal tensor autodiff used by the tracker network.

mod graph;
mod params;
mod tensor;

pub use graph::{multi_head_attention, softmax_in_place, ConvSpec, Gradients, Graph, Var};
pub use params::{Adam, AdamConfig, Init, ParamSet};
pub use tensor::Tensor;
