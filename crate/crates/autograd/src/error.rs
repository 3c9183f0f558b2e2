use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input {value} at flat index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("convolution: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },

    #[error("convolution: output extent along axis {axis} would be non-positive")]
    NonPositiveExtent { axis: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward requires a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor is not recorded on this tape")]
    NotOnTape,

    #[error("operands are recorded on different tapes")]
    TapeMismatch,

    #[error("tape was already consumed by a first-order backward pass")]
    TapeConsumed,

    #[error("tape does not record reverse passes; create it with Tape::higher_order")]
    HigherOrderDisabled,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
