use thiserror::Error;

/// Errors produced anywhere in the distillation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model spec error at {location}: {message}")]
    Spec { location: String, message: String },

    #[error("weights file: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("config: {0}")]
    Config(String),

    #[error("nothing to do: {0}")]
    NothingToDo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 bad input, 3 nothing to do, 4 internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NothingToDo(_) => 3,
            Error::Shape(_) | Error::Diverged(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn spec(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
