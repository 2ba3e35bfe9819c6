use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numerical error in layer {layer}: {detail}")]
    Numerical { layer: usize, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: ragged feature row ({found} values, expected {expected})")]
    RaggedFeatures {
        file: PathBuf,
        line: usize,
        found: usize,
        expected: usize,
    },

    #[error("{file}:{line}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        file: PathBuf,
        line: usize,
        label: i64,
        n_classes: usize,
    },

    #[error("{file}:{line}: {detail}")]
    Parse {
        file: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("content hash mismatch for {file}: meta.json says {expected}, file hashes to {actual}")]
    HashMismatch {
        file: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("class {class} has {available} nodes, {requested} requested")]
    ClassTooSmall {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
