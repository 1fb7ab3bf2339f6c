use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    ValidationFailure(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("value iteration did not converge: residual {residual:e} > bound {bound:e} after {iterations} iterations")]
    NonConvergence { residual: f64, bound: f64, iterations: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("instance generation failed after {attempts} attempts: {reason}")]
    GenerationFailure { attempts: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("candidate class is empty")]
    EmptyClass,

    #[error("non-positive transition mass {mass:e} at row {row}; the normalization regularizer is undefined")]
    NonPositiveMass { row: usize, mass: f64 },

    #[error("feature constraint violated: ||E[phi phi^T] - I||_F = {deviation:e}")]
    ConstraintViolation { deviation: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("optimization diverged at step {step}: total loss {total:e}")]
    DivergenceDetected { step: usize, total: f64 },

    #[error("matrix has numerical rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("degenerate sweep: {0}")]
    DegenerateSweep(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Numerical failures (as opposed to bad inputs) map to a distinct CLI exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularSystem(_)
                | Error::NonPositiveMass { .. }
                | Error::DivergenceDetected { .. }
                | Error::RankDeficient { .. }
                | Error::DegenerateSweep(_)
                | Error::GenerationFailure { .. }
        )
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::ValidationFailure(msg.into())
    }
}
