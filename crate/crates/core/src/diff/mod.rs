//! Minimal reverse-mode differentiation over dense `f64` tensors, plus the
//! parameter store and Adam optimizer that everything trainable goes through.

mod graph;
pub mod ops;
mod store;
mod tensor;

pub use graph::{Eager, Gradients, Graph, ParamGrads, Tape, Var};
pub use ops::{GatherIndex, Op};
pub use store::{AdamConfig, ParamId, ParameterStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D operand, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: empty operand")]
    Empty { op: &'static str },
    #[error("{op}: unsupported axis {axis}")]
    BadAxis { op: &'static str, axis: usize },
    #[error("shape {shape:?} does not hold {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {expected:?}, refusing {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}
