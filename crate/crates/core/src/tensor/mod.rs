//! Reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! A [`Tensor`] is a plain value. Computation is recorded on a [`Graph`]
//! (a tape); values on the tape are addressed by [`Var`] handles and carry the
//! `requires_grad` flag and, after [`Graph::backward`], their gradient.
//! Parameters are copied onto a fresh graph for each forward pass, so
//! forward never mutates shared parameter data.

mod array;
pub mod gradcheck;
mod graph;
mod ops;

pub use array::{broadcast_shape, Tensor};
pub use gradcheck::{central_difference, grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::sigmoid;

pub(crate) use ops::{matmul_nt, matmul_raw, matmul_tn};
