use thiserror::Error;

/// Errors surfaced by tensor ops, model construction, data loading and the runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for tensor of shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
