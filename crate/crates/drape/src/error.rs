//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: String, detail: String },

    #[error("{context}: non-finite values")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range (network has {num_labels} labels)")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("timestep {t} out of range (T = {t_total})")]
    TimestepOutOfRange { t: usize, t_total: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("backward: no tracked inputs reach the loss")]
    NoTrackedInputs,

    #[error("degenerate noise difference: zero variance")]
    DegenerateDifference,

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
