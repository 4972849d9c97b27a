//! Reverse-mode automatic differentiation over an append-only expression
//! graph. Gradients come back as graph nodes, so they can be differentiated
//! a second time.

mod backward;
pub mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use backward::Gradients;
pub use graph::{ConvMode, Graph, NodeId, Op, OpKind, Padding};
pub use tensor::{numel, Tensor};

#[cfg(test)]
mod tests;
