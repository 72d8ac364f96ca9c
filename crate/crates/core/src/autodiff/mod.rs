//! Reverse-mode automatic differentiation over small dense f64 tensors.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error, DEFAULT_EPS, RELATIVE_ERROR_FLOOR};
pub use tape::{mean_bce, stable_sigmoid, Activation, BinaryKind, Gradients, ReduceKind, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("concat needs at least one part")]
    EmptyConcat,
    #[error("input has {found} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("kernel size {kernel} must be odd and dilation {dilation} positive")]
    InvalidKernel { kernel: usize, dilation: usize },
}
