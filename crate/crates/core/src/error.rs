use thiserror::Error;

/// Errors raised anywhere in the sampling lab.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error at step {step}: {detail}")]
    NumericAtStep { step: usize, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The marginal covariance is singular: a point-mass component evaluated at t = 1.
    #[error("velocity has a pole at the data (component {component}, t = {t})")]
    PoleAtData { component: usize, t: f64 },

    #[error("insufficient kernel overlap: effective sample size {ess:.2} < {min}")]
    InsufficientOverlap { ess: f64, min: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("unsupported dimension {got}; expected {expected}")]
    UnsupportedDimension { got: usize, expected: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {detail}")]
    Io { path: String, detail: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), detail: err.to_string() }
    }

    /// Attach a step index to a step-less numeric error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric(detail) => Error::NumericAtStep { step, detail },
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericAtStep { .. }
                | Error::Numeric(_)
                | Error::PoleAtData { .. }
                | Error::InsufficientOverlap { .. }
                | Error::TrainingDiverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
