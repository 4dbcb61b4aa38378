use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-integral convolution output: size {size}, kernel {kernel}, stride {stride}, padding {padding}")]
    ConvOutputSize {
        size: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("point at infinity: homography denominator {0:e}")]
    PointAtInfinity(f64),

    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("singular matrix (det = {0:e})")]
    Singular(f64),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("rejection sampling budget exhausted while placing {0}")]
    RejectionBudget(&'static str),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}
