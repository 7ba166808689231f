use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown compute unit `{0}`")]
    UnknownCu(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("phase order: {0}")]
    PhaseOrder(String),

    #[error("artifact: {0}")]
    Artifact(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable tag, printed by the CLI on failure.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape-mismatch",
            Error::Backward(_) => "backward",
            Error::MissingGrad(_) => "missing-grad",
            Error::UnknownCu(_) => "unknown-cu",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "malformed-config",
            Error::Data(_) => "dataset",
            Error::PhaseOrder(_) => "phase-order",
            Error::Artifact(_) => "artifact",
            Error::Invalid(_) => "invalid-argument",
            Error::Io(_) => "io",
        }
    }
}
