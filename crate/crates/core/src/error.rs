use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the closed domain of a function (e.g. `|r| > 1` for `F`).
    #[error("domain error: {0}")]
    Domain(String),
    /// Evaluation at a barrier where `F'` is unbounded.
    #[error("singularity: F' is unbounded at r = {0}")]
    Singularity(f64),
    #[error("numeric failure in {module}: {message}")]
    Numeric { module: &'static str, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    /// Experiment refused because a theoretical precondition does not hold.
    #[error("gated out: {0}")]
    Gated(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn numeric(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numeric {
            module,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
