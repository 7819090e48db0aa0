use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("patch size {ph}x{pw} does not divide spatial size {h}x{w}")]
    PatchSize { ph: usize, pw: usize, h: usize, w: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate batch in batch_norm2d: only one value per channel in training mode")]
    DegenerateBatch,

    #[error("decoder wiring error: {0}")]
    DecoderWiring(String),

    #[error("invalid model config:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("config mismatch on field `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint tensor `{name}`: {detail}")]
    CheckpointTensor { name: String, detail: String },

    #[error("image format error in {path}: {detail}")]
    ImageFormat { path: PathBuf, detail: String },

    #[error("unsupported image format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("mask is not binary: found value {0}")]
    NonBinary(f64),

    #[error("epoch {epoch} outside schedule range [0, {total}]")]
    ScheduleRange { epoch: f64, total: f64 },

    #[error("unknown report format `{0}` (expected table, json or csv)")]
    UnknownFormat(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
