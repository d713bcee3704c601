//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is recorded once with a [`GraphBuilder`] and evaluated any
//! number of times. Each [`Graph::evaluate`] call produces an [`Execution`]
//! holding that call's forward values; [`Execution::backward`] walks the
//! nodes in exact reverse order and returns leaf gradients in fresh buffers,
//! so concurrent evaluations of one graph never share mutable state.
//!
//! Non-finite values are checked after every primitive in debug builds.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Bindings, Execution, Gradients, Graph, GraphBuilder, NodeId, Reduce};
pub use tensor::{Real, Tensor};

pub(crate) use graph::is_permutation;
pub(crate) use tensor::checked_numel;
