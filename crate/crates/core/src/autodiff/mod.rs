//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every evaluation: leaves are created with
//! [`Graph::param`] (trainable) or [`Graph::constant`], operations append
//! nodes, and [`Graph::backward`] sweeps the tape in reverse. Gradients of a
//! node consumed more than once are summed.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_into;
