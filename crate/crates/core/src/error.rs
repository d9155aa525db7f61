use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("training diverged at {stage} {at}: {source}")]
    Diverged {
        stage: &'static str,
        at: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config: {path}: {detail}")]
    Config { path: String, detail: String },

    #[error("missing {stage} artifact: {path}")]
    MissingStage { stage: &'static str, path: String },

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

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Short machine-readable kind, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Backward(_) => "backward",
            Error::Invalid(_) => "invalid_input",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::MissingStage { .. } => "missing_stage",
            Error::Io(_) => "io",
        }
    }
}
