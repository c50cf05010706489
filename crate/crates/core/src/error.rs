use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward: loss must be a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),
}

/// Errors surfaced by model construction, IO and the command layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("audit: {0}")]
    Audit(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 numeric, 4 audit, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Tensor(TensorError::NonFinite { .. }) => 3,
            Error::Tensor(_) | Error::Numeric(_) => 3,
            Error::Audit(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
