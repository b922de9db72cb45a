//! Reverse-mode autodiff over f64 tensors and the transformer layers built
//! on it.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::*;
pub use params::{clip_grad_norm, Adam, OptimConfig, ParamId, ParamStore};
pub use tensor::Tensor;
