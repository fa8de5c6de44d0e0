//! Minimal reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Values are never mutated once
//! a node exists; [`Graph::backward`] walks nodes in reverse creation order and
//! accumulates into each node's gradient.

mod check;
mod graph;
mod tensor;

pub use check::{
    analytic_gradients, compare_gradients, finite_diff_check, relative_error, GradCheck,
    DEFAULT_FD_EPS,
};
pub use graph::{stable_softplus, Graph, NodeId, NORM_FLOOR};
pub use tensor::{dot, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index {index} out of bounds ({bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
