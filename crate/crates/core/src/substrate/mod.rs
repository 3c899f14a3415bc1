//! Minimal differentiable-computation substrate: tensors, a reverse-mode tape,
//! layers, optimizers, gradient reversal and a finite-difference checker.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_probe, ProbedGradient};
pub use graph::{Function, Graph, Output, ParamKey, Value, Var};
pub use layers::{Layer, Parameter, Sequential};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{argmax, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SubstrateError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("gradient reversal lambda must be >= 0, got {0}")]
    NegativeLambda(f32),
    #[error("unsupported convolution: kernel {kernel}, stride {stride}")]
    UnsupportedConv { kernel: usize, stride: usize },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("optimizer called with a different parameter group")]
    OptimizerGroupChanged,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
