use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, model construction and training.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    Shape(String),
    /// A model, scheme or ladder configuration violates an invariant.
    Config(String),
    /// Bad runtime input (token id out of range, overlong sequence, ...).
    Input(String),
    /// Base and target tensors cannot be matched for warmstarting.
    Plan(String),
    /// The corpus cannot serve the requested token budget without repeats.
    DataExhausted { needed: u64, available: u64 },
    /// A loss or gradient became non-finite during training.
    NonFinite { what: String, step: u64 },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Plan(msg) => write!(f, "warmstart plan error: {msg}"),
            Error::DataExhausted { needed, available } => write!(
                f,
                "data exhausted: need {needed} unseen tokens but only {available} remain"
            ),
            Error::NonFinite { what, step } => {
                write!(f, "non-finite {what} at step {step}; run aborted")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
