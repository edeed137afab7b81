use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a documented domain constraint.
    #[error("domain error: {0}")]
    Domain(String),

    /// A spectrum or grid file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// The Fisher information matrix is not positive definite.
    #[error("singular information matrix (lambda_min = {lambda_min:e}, condition = {condition:e})")]
    Singular { lambda_min: f64, condition: f64 },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("design error: {0}")]
    Design(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::Initialization(_) | Error::Fit(_) | Error::Design(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
