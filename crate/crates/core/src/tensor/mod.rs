//! Reverse-mode automatic differentiation on dense CPU arrays.
//!
//! The engine is a growing tape: every operation appends a node holding the
//! eagerly computed value plus enough information to run its vector-Jacobian
//! product. Creation order doubles as a topological order, so backpropagation
//! is a single reverse sweep with gradient accumulation at fan-out points.
//!
//! All operations validate shapes and check outputs for non-finite values,
//! returning [`TensorError`] instead of panicking.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod ops;
pub mod params;

pub use array::{rot90_chw, Array};
pub use graph::{Gradients, Graph, TensorId};
pub use params::{AdamConfig, Param, ParamStore};

/// Errors surfaced by graph construction and backpropagation.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a scalar, got {numel} elements")]
    NotScalar { op: &'static str, numel: usize },
    #[error("{op}: tensor id {id} does not belong to this graph")]
    UnknownTensor { op: &'static str, id: usize },
    #[error("{op}: {why}")]
    Invalid { op: &'static str, why: String },
}
