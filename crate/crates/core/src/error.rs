use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("gradient root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("top-5 margin loss requires ≥ 6 classes (got {0})")]
    TooFewClasses(usize),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("reconstruction error {error} above gate {gate}")]
    ReconstructionGate { error: f64, gate: f64 },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble members disagree: {0}")]
    EnsembleMismatch(String),
    #[error("partition group too small: {0}")]
    DegenerateGroup(String),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
