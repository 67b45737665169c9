//! Shared error type for all flow components.

use thiserror::Error;

/// Errors produced by target construction, kernel evaluation, and flow drivers.
#[derive(Debug, Error)]
pub enum FlowError {
    /// A domain object could not be built from the given inputs.
    #[error("construction error: {0}")]
    Construction(String),

    /// Vector or matrix shapes do not agree.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// A covariance (or the factor A defining it) is singular or too
    /// ill-conditioned to invert reliably.
    #[error("singular or ill-conditioned covariance: {0}")]
    SingularCovariance(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value encountered{}: {what}", step_suffix(.step))]
    Numerical { what: String, step: Option<usize> },

    /// An operation that averages over samples received none (or too few).
    #[error("empty or too small sample set: {0}")]
    EmptyEnsemble(String),

    /// The requested kernel cannot be used with this operation
    /// (e.g. a matrix-valued kernel without an analytic y-gradient).
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    /// A distribution-dependent kernel was evaluated without a context.
    #[error("kernel context required: {0}")]
    ContextRequired(String),

    /// The operation is only defined for d = 1 or d = 2.
    #[error("unsupported dimension {dim}: {what}")]
    UnsupportedDimension { dim: usize, what: String },

    /// File or directory I/O failed.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn step_suffix(step: &Option<usize>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

impl FlowError {
    /// Attach a step index to a numerical error bubbling out of a flow loop.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            FlowError::Numerical { what, .. } => FlowError::Numerical {
                what,
                step: Some(step),
            },
            other => other,
        }
    }

    /// The step index carried by a numerical error, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            FlowError::Numerical { step, .. } => *step,
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
