use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variant names are part of the external contract: the CLI, the HTTP
/// service and the Python module all surface them verbatim via [`Error::name`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range for graph with {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("feature row {row} has length {found}, expected {expected}")]
    RaggedFeatures {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("explicit self-loop on node {0}")]
    SelfLoop(usize),
    #[error("node {j} is not in the closed neighborhood of node {i}")]
    NotANeighbor { i: usize, j: usize },
    #[error("seed list is empty")]
    EmptySeeds,
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),
    #[error("non-finite weight in tensor {0}")]
    NonFiniteWeight(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("stage order violation: {0}")]
    StageOrderViolation(String),
    #[error("unknown step {0}")]
    UnknownStep(u32),
    #[error("step {0} is an input or parameter and has no provenance")]
    InputStepHasNoProvenance(u32),
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
    #[error("graph with {nodes} nodes exceeds the trace limit of {limit}")]
    TooLargeToTrace { nodes: usize, limit: usize },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("{}: {detail}", location(path, *line))]
    CorruptDataFile {
        path: PathBuf,
        line: Option<usize>,
        detail: String,
    },
    #[error("schema error at {0}")]
    SchemaError(String),
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn location(path: &std::path::Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{}", path.display(), l),
        None => path.display().to_string(),
    }
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::RaggedFeatures { .. } => "RaggedFeatures",
            Error::DuplicateEdge(..) => "DuplicateEdge",
            Error::SelfLoop(_) => "SelfLoop",
            Error::NotANeighbor { .. } => "NotANeighbor",
            Error::EmptySeeds => "EmptySeeds",
            Error::NotAPermutation(_) => "NotAPermutation",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteInput => "NonFiniteInput",
            Error::EmptyGraph => "EmptyGraph",
            Error::ParseError(_) => "ParseError",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::NonFiniteWeight(_) => "NonFiniteWeight",
            Error::SpecMismatch(_) => "SpecMismatch",
            Error::InvalidTarget(_) => "InvalidTarget",
            Error::StageOrderViolation(_) => "StageOrderViolation",
            Error::UnknownStep(_) => "UnknownStep",
            Error::InputStepHasNoProvenance(_) => "InputStepHasNoProvenance",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::UnknownNode(_) => "UnknownNode",
            Error::IncompleteTrace(_) => "IncompleteTrace",
            Error::TooLargeToTrace { .. } => "TooLargeToTrace",
            Error::UnknownDataset(_) => "UnknownDataset",
            Error::CorruptDataFile { .. } => "CorruptDataFile",
            Error::SchemaError(_) => "SchemaError",
            Error::InvalidSelector(_) => "InvalidSelector",
            Error::Io { .. } => "Io",
        }
    }

    /// True when the failure was caused by the caller's input rather than by
    /// the engine or its installed data.
    pub fn is_client_error(&self) -> bool {
        !matches!(
            self,
            Error::StageOrderViolation(_)
                | Error::IncompleteTrace(_)
                | Error::CorruptDataFile { .. }
                | Error::Io { .. }
                | Error::NonFiniteWeight(_)
                | Error::UnsupportedVersion(_)
        )
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
