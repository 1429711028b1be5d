//! Dense tensors and a define-by-run reverse-mode tape covering the operator
//! set of the encoder: pointwise and same-padded convolutions, batch
//! normalization, activations, spatial/channel pooling, dense layers and the
//! fused loss heads.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are registered with
//! [`Tape::param`] (gradient wanted) or [`Tape::constant`]; every op returns a
//! [`Var`] handle into the tape. [`Tape::backward`] may be called once per
//! tape; a second call is rejected with [`NumericsError::AlreadyBackpropagated`].

mod gradcheck;
mod loss_ops;
mod ops;
mod tape;
mod tensor;


pub use gradcheck::{central_difference, check_gradients, relative_error};
pub use ops::{sigmoid_scalar, softmax, BnMode, PoolMode, RunningMoments};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    SizeMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("{op}: dimension mismatch on {axis} axis (expected {expected}, found {found})")]
    Dimension { op: &'static str, axis: &'static str, expected: usize, found: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, found shape {shape:?}")]
    Rank { op: &'static str, expected: &'static str, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch-norm running moments read before any training step")]
    UninitializedState,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape has already been back-propagated")]
    AlreadyBackpropagated,
    #[error("contract violation: {0}")]
    Contract(String),
}
