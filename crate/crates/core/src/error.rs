use thiserror::Error;

/// Errors raised by instance validation, solvers and experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented invariant. `path` locates it inside the instance.
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// The instance is too large for an exhaustive procedure.
    #[error("budget exceeded: {what} needs {needed}, budget is {budget}")]
    Budget {
        what: &'static str,
        needed: u128,
        budget: u128,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefix the location of an `Invalid` error with `prefix`.
    pub(crate) fn at(self, prefix: &str) -> Self {
        match self {
            Error::Invalid { path, message } => {
                let path = if path.is_empty() {
                    prefix.to_string()
                } else if path.starts_with('[') {
                    format!("{prefix}{path}")
                } else {
                    format!("{prefix}.{path}")
                };
                Error::Invalid { path, message }
            }
            other => other,
        }
    }
}

pub(crate) fn check_budget(what: &'static str, needed: u128, budget: u128) -> Result<()> {
    if needed > budget {
        Err(Error::Budget {
            what,
            needed,
            budget,
        })
    } else {
        Ok(())
    }
}
