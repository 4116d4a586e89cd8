use std::io;

use thiserror::Error;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: norm below {threshold:e}")]
    ZeroVector { threshold: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad range: lo={lo} must be < hi={hi}")]
    BadRange { lo: f64, hi: f64 },
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("bad sizes: {0}")]
    BadSizes(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("row {row} ({id}) has norm {norm}, outside the re-normalization tolerance")]
    NotNormalized { row: usize, id: String, norm: f64 },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid record: {msg}")]
    InvalidRecord { line: usize, msg: String },
    #[error("no overlapping ids between tables")]
    EmptyJoin,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no grammar rule applies to caption {0:?}")]
    NoRuleApplies(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("degenerate output: norm {norm:e} below {threshold:e}")]
    DegenerateOutput { norm: f64, threshold: f64 },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("bad K={k} for candidate set of size {size}")]
    BadK { k: usize, size: usize },
    #[error("missing ground truth for query {0}")]
    MissingGroundTruth(String),
    #[error("query {query}: subset does not contain target {target}")]
    SubsetMissingTarget { query: String, target: String },
    #[error("query {query}: unknown id {id}")]
    UnknownId { query: String, id: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | BadRange { .. } | BadDims(_) | BadSizes(_) | BadK { .. } => {
                ErrorClass::Config
            }
            ZeroVector { .. } | DegenerateOutput { .. } | NonFiniteLoss { .. } | NonFinite(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }

    /// Short variant name, stable across releases; used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            ZeroVector { .. } => "ZeroVector",
            DimMismatch { .. } => "DimMismatch",
            EmptyInput => "EmptyInput",
            EmptyBatch => "EmptyBatch",
            EmptyDataset => "EmptyDataset",
            BadRange { .. } => "BadRange",
            BadDims(_) => "BadDims",
            BadSizes(_) => "BadSizes",
            NonFinite(_) => "NonFinite",
            Io(_) => "IoError",
            BadMagic { .. } => "BadMagic",
            VersionMismatch { .. } => "VersionMismatch",
            CorruptPayload(_) => "CorruptPayload",
            NotNormalized { .. } => "NotNormalized",
            InvariantViolation(_) => "InvariantViolation",
            Parse { .. } => "ParseError",
            InvalidRecord { .. } => "InvariantViolation",
            EmptyJoin => "EmptyJoin",
            ShapeMismatch(_) => "ShapeMismatch",
            NoRuleApplies(_) => "NoRuleApplies",
            Transport(_) => "TransportError",
            MalformedResponse(_) => "MalformedResponse",
            DegenerateOutput { .. } => "DegenerateOutput",
            StaleCache(_) => "StaleCache",
            NonFiniteLoss { .. } => "NonFiniteLoss",
            BadK { .. } => "BadK",
            MissingGroundTruth(_) => "MissingGroundTruth",
            SubsetMissingTarget { .. } => "SubsetMissingTarget",
            UnknownId { .. } => "UnknownId",
            Config(_) => "ConfigError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, actual })
    }
}
