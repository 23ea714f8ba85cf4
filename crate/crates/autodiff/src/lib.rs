//! Minimal dense-tensor core with tape-based reverse-mode differentiation.
//!
//! All values are `f64` and stored row-major. Spatial tensors use `[H, W, C]`
//! layout throughout. A [`Graph`] records primitive applications as they are
//! evaluated; [`Graph::backward`] then returns gradients for every trainable
//! leaf.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;
pub mod warp;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, relative_error};
pub use graph::{Activation, Gradients, Graph, Padding, Var};
pub use kernels::{sigmoid, softplus};
pub use tensor::Tensor;
pub use warp::{nearest_warp, Rigid2};
