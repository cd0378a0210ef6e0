use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(&'static str),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    /// `½Σ⁻¹ + aA` is not positive definite, so the exponential moment of the
    /// scaled barrier does not exist.
    #[error("Λ = ½Σ⁻¹ + aA is not positive definite")]
    LambdaNotPD,

    #[error("unsupported barrier form: {0}")]
    UnsupportedBarrierForm(String),

    #[error("α = 1 + Tr(AΣ) = {alpha} lies outside (0, 1)")]
    AlphaOutOfRange { alpha: f64 },

    #[error("no input satisfies the barrier condition (best residual {best_residual:e})")]
    Infeasible { best_residual: f64 },

    #[error("solver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("non-finite integrand value at sample {sample}")]
    NonFiniteSample { sample: usize },

    #[error("safety filter infeasible at step {step} (state {state:?})")]
    TrialAborted { step: usize, state: Vec<f64> },

    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),

    #[error("scenario document: {0}")]
    Document(String),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}
