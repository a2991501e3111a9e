//! Dense 2-D tensors with a reverse-mode tape: linear layers, softmax,
//! layer normalization, multi-head attention and cross-entropy.

mod attention;
pub mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use attention::{full_segments, multi_head_attention, AttentionConfig, AttentionParams};
pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Segment, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{matmul, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("tensor shape [{rows}, {cols}] has a zero dimension")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} values, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("model dim {model_dim} is not divisible by {num_heads} heads")]
    HeadsMismatch { model_dim: usize, num_heads: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
}
