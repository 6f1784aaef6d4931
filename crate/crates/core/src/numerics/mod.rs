//! Dense tensor substrate with a reverse-mode differentiation graph.
//!
//! Gradients are checked against central finite differences; see
//! [`check::finite_difference`].

pub mod check;
mod graph;
mod param;
mod tensor;

pub use graph::{BoundParams, Gradients, Graph, Var};
pub use param::ParamSet;
pub use tensor::{Mask, Tensor};
