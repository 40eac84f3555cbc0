//! Small dense neural-network engine: tensors, a reverse-mode tape, the
//! transformer stack and AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod transformer;

pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, linear_decay_lr, AdamWConfig, OptState};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};
pub use transformer::{StackCache, StackSpec};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target {target} outside vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("graph misuse: {0}")]
    Graph(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}
