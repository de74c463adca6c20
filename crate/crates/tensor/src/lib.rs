//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every forward computation records onto a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse. Image-shaped data is channels-last
//! (`[batch, height, width, channels]`) throughout.

pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use ops::conv::conv_out_size;
pub use ops::shape::concat;
pub use ops::spectral::{half_width, irfft2, irfft2_tensor, rfft2_tensor};
pub use tensor::Tensor;
