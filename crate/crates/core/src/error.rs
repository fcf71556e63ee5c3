use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not fit the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument or dataset violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration field is out of range. The first field names the key.
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Operation invoked in the wrong lifecycle state (e.g. backward with no forward).
    #[error("state error: {0}")]
    State(String),

    /// A NaN or infinity appeared in a computed value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A binary or text artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the message with context (fold, epoch, ...) while keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{ctx}: {reason}"),
            },
            Error::State(m) => Error::State(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
