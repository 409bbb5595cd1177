use thiserror::Error;

/// Errors produced by the multiscale pipeline.
#[derive(Debug, Error)]
pub enum LodError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A nonlinear model produced a non-finite value.
    #[error("coefficient evaluation overflowed at s = {0}")]
    Overflow(f64),

    #[error("ellipticity violated: alpha = {value} on fine element {element}")]
    Ellipticity { element: usize, value: f64 },

    #[error("linear solve failed: {0}")]
    SolverFailure(String),

    /// A local corrector system could not be solved.
    #[error("corrector solve failed on patch centred at coarse element {patch}: {reason}")]
    PatchSolve { patch: usize, reason: String },

    #[error("non-finite iterate after {0} iterations")]
    NonFinite(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LodError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LodError {
    LodError::InvalidArgument(msg.into())
}
