use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("regularizer {0} is not supported by this operation")]
    UnsupportedRegularizer(&'static str),

    #[error("{solver} failed: {reason}")]
    SolverFailure {
        solver: &'static str,
        reason: String,
    },

    #[error("discrepancy derivative vanished at mu = {mu:e}; retry with a different initial mu")]
    FlatDerivative { mu: f64 },

    #[error("reference image is identically zero, peak value undefined")]
    UndefinedPeak,

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dimension(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures of an iterative solver (divergence, flat derivative).
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::SolverFailure { .. } | Error::FlatDerivative { .. })
    }
}
