//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built by running ordinary code against a [`Tape`]: every
//! operation appends a node holding its output and the rule for its local
//! gradient. Nodes are appended in evaluation order, so reverse insertion
//! order is a valid topological order and [`Tape::backward`] visits every
//! node once. A tape lives for one forward/backward pass and is dropped
//! afterwards.

mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_params, GradCheck, GradPoint, FD_STEP, REL_FLOOR};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Gradients, Reduce, Tape, Unary, Var};
pub use tensor::{Tensor, TENSOR_MAGIC};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("matmul: inner extents differ ({lhs:?} x {rhs:?})")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gather: {0}")]
    Gather(String),
    #[error("bad tensor magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("corrupt tensor block: {0}")]
    Corrupt(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
