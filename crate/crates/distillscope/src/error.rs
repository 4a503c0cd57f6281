use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset load error for {path}: {msg}")]
    Load { path: String, msg: String },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint magic mismatch (expected \"KDVC\")")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint manifest disagrees with model: {0}")]
    ManifestMismatch(String),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
