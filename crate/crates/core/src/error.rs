use std::path::PathBuf;

use thiserror::Error;

use crate::graph_ir::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed ONNX file: {0}")]
    MalformedFile(String),
    #[error("graph contains a directed cycle")]
    CyclicGraph,
    #[error("node {node} consumes undefined value {name:?}")]
    DanglingReference { node: NodeId, name: String },
    #[error("graph has {0} weakly connected components, expected 1")]
    MultipleComponents(usize),
    #[error("unsupported construct: {0}")]
    UnsupportedConstruct(String),
    #[error("unsupported opset version {0} (accepted range 9..=20)")]
    UnsupportedOpset(i64),
    #[error("shape mismatch at node {node} ({op}): {reason}")]
    ShapeMismatch {
        node: NodeId,
        op: String,
        reason: String,
    },
    #[error("constant folding of node {node} would produce {elements} elements (budget {budget})")]
    FoldOverflow {
        node: NodeId,
        elements: usize,
        budget: usize,
    },
    #[error("simplification did not reach a fixpoint within {0} iterations")]
    FixpointNotReached(usize),
    #[error("operator {0} is not supported by the reference executor")]
    UnsupportedOp(String),
    #[error("missing tensor for value {0:?}")]
    MissingTensor(String),
    #[error("histogram is empty (graph has no non-Constant nodes)")]
    EmptyHistogram,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no comparable pairs: all accuracies are equal")]
    NoComparablePairs,
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("split specification yields an empty validation set")]
    EmptyVal,
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedFile(_) => "MalformedFile",
            Error::CyclicGraph => "CyclicGraph",
            Error::DanglingReference { .. } => "DanglingReference",
            Error::MultipleComponents(_) => "MultipleComponents",
            Error::UnsupportedConstruct(_) => "UnsupportedConstruct",
            Error::UnsupportedOpset(_) => "UnsupportedOpset",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::FoldOverflow { .. } => "FoldOverflow",
            Error::FixpointNotReached(_) => "FixpointNotReached",
            Error::UnsupportedOp(_) => "UnsupportedOp",
            Error::MissingTensor(_) => "MissingTensor",
            Error::EmptyHistogram => "EmptyHistogram",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NoComparablePairs => "NoComparablePairs",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::DuplicateId(_) => "DuplicateId",
            Error::EmptyVal => "EmptyVal",
            Error::InvalidModel(_) => "InvalidModel",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: NodeId, op: &str, reason: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node,
            op: op.to_string(),
            reason: reason.into(),
        }
    }
}
