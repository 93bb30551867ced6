use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum MfcError {
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("dimension mismatch at `{path}`: expected {expected}, found {found}")]
    Dimension {
        path: String,
        expected: String,
        found: String,
    },

    #[error("problem failed validation: {0}")]
    Validation(String),

    #[error("integration of {what} blew up at node {node} (|entry| > 1e12)")]
    BlowUp { what: &'static str, node: usize },

    #[error("trajectory is not in the admissible space: {0}")]
    Dynamics(String),

    #[error("callback returned an invalid value at particle {particle}: {message}")]
    Callback { particle: usize, message: String },

    #[error("fixed point did not converge after {iterations} iterations (last residual {last_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        history: Vec<f64>,
    },

    #[error("input is not adapted: {0}")]
    NotAdapted(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MfcError> = std::result::Result<T, E>;

impl MfcError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        MfcError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(
        path: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        MfcError::Dimension {
            path: path.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}
