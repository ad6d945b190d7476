use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("query outside data support at {0}")]
    OutsideSupport(f64),

    #[error("smoothing denominator underflow at grid point y = {0}")]
    DenominatorUnderflow(f64),

    #[error("density estimate below 1e-10 at knot y = {0}; knot lies outside the labeled support")]
    SupportViolation(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("root solver did not converge after {iterations} iterations (residual norm {residual:.3e}, last iterate {theta:?})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        theta: Vec<f64>,
    },

    #[error("confusion matrix not invertible (condition number {0:.3e})")]
    ConfusionNotInvertible(f64),

    #[error("class {0} not observed among labeled rows")]
    MissingClass(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::OutsideSupport(_)
                | Error::DenominatorUnderflow(_)
                | Error::SupportViolation(_)
                | Error::NonFinite(_)
                | Error::Singular(_)
                | Error::NoConvergence { .. }
                | Error::ConfusionNotInvertible(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
