//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad field value, inconsistent shapes at setup
    /// time, missing required inputs.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// An input violated a documented domain precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse, e.g. a backward pass against a stale cache.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value surfaced during training. Carries enough context
    /// to locate the offending iteration and loss term.
    #[error("non-finite value in {loss} at iteration {iteration}: {detail}")]
    NonFinite {
        iteration: u64,
        loss: String,
        detail: String,
    },

    /// The collapse monitor fired on a run configured to treat it as fatal.
    #[error("training collapse detected at iteration {iteration}: {detail}")]
    Collapse { iteration: u64, detail: String },

    /// Checkpoint encoding/decoding failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for config errors, 3 for fatal
    /// collapse, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Collapse { .. } => 3,
            _ => 1,
        }
    }

    /// Single-line machine-readable error record.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Error::Config { .. } => "config",
            Error::Domain(_) => "domain",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "non_finite",
            Error::Collapse { .. } => "collapse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        };
        serde_json::json!({
            "error": kind,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
