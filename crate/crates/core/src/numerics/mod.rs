//! Tensor arithmetic and reverse-mode differentiation for the model graph.

mod backend;
mod graph;
pub mod tensor;

pub use backend::{Backend, Eager};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Broadcast, Tensor, SQRT_EPS};
