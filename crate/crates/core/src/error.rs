use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the merge engine.
///
/// Every variant maps onto a stable machine-readable class (see [`Error::class`])
/// so that front ends can report failures without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed tensor file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: malformed shard index: {reason}")]
    MalformedIndex { path: PathBuf, reason: String },
    #[error("shard missing tensor `{tensor}` (index points at {shard})")]
    ShardMissingTensor { tensor: String, shard: PathBuf },
    #[error("duplicate tensor `{0}` across shards")]
    DuplicateTensor(String),
    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: shape {shape:?} does not hold {len} elements")]
    ShapeLength {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("remap collision: `{first}` and `{second}` both map to `{target}`")]
    RemapCollision {
        first: String,
        second: String,
        target: String,
    },
    #[error("shape mismatch for `{name}`: base {base:?}, multilingual {ml:?}, anchor {anchor:?}")]
    ShapeMismatch {
        name: String,
        base: Vec<usize>,
        ml: Vec<usize>,
        anchor: Vec<usize>,
    },
    #[error("tensor `{name}` has unsupported rank {rank} for merging")]
    UnsupportedRank { name: String, rank: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint is empty")]
    EmptyCheckpoint,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Dotted error class, e.g. `format.header` or `shape.mismatch`.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io.error",
            Error::MalformedFile { .. } => "format.header",
            Error::MalformedIndex { .. } => "format.index",
            Error::ShardMissingTensor { .. } => "format.shard_missing_tensor",
            Error::DuplicateTensor(_) => "format.duplicate_tensor",
            Error::UnsupportedDtype { .. } => "format.dtype",
            Error::ShapeLength { .. } => "shape.length",
            Error::RemapCollision { .. } => "config.remap_collision",
            Error::ShapeMismatch { .. } => "shape.mismatch",
            Error::UnsupportedRank { .. } => "shape.rank",
            Error::Dimension(_) => "shape.dimension",
            Error::NonFinite(_) => "numeric.non_finite",
            Error::InvalidArgument(_) => "config.invalid_argument",
            Error::Config(_) => "config.invalid",
            Error::EmptyCheckpoint => "config.empty_checkpoint",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
