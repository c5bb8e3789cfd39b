use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("batch-size error: need at least {need} samples, got {got}")]
    BatchSize { need: usize, got: usize },

    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("numeric error: {component} is not finite ({value})")]
    Numeric { component: String, value: f64 },

    #[error("at step {step}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at `{key}`: {message}")]
    Parse { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this is, or wraps, a non-finite value.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
