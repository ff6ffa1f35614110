//! Dense tensors, reverse-mode autodiff and a finite-difference oracle.

mod element;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use element::{DType, Element};
pub use gradcheck::{finite_diff_check, Coords};
pub use graph::{softmax_into, Graph, Var, LAYER_NORM_EPS};
pub use params::{glob_match, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
