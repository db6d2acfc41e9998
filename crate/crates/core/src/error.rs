use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("mass matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularMass { condition: f64 },

    #[error("mass matrix must be symmetric positive definite")]
    BadMass,

    #[error("Legendre inversion failed after {iters} iterations (residual {residual:.3e})")]
    LegendreInversionFailed { iters: usize, residual: f64 },

    #[error("retraction axiom violated: {symbol} off by {magnitude:.3e}")]
    ViolationFound { symbol: &'static str, magnitude: f64 },

    #[error("interior stage solve failed (stage residual {residual:.3e})")]
    InnerSolveFailed { residual: f64 },

    #[error("Newton iteration diverged after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },

    #[error("discrete Lagrangian is singular (D12 not invertible)")]
    SingularD12,

    #[error("step size {h:e} is below the supported minimum")]
    StepTooSmall { h: f64 },

    #[error("step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("time grids do not match")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("reference solutions disagree by {disagreement:.3e}")]
    ReferenceMismatch { disagreement: f64 },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::StepFailed {
            step,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
