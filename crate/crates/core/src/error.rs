use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} sites, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size guard exceeded: {0}")]
    Guard(String),

    #[error("operator is not hermitian")]
    NotHermitian,

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<Error> },

    #[error("jump on site {site} at step {step}: {source}")]
    Jump { site: usize, step: usize, source: Box<Error> },

    #[error("zero-norm jump on site {0}")]
    ZeroNormJump(usize),

    #[error("trace drift {drift:.3e} at t = {t}")]
    TraceDrift { drift: f64, t: f64 },

    #[error("series has zero variance; autocorrelation undefined")]
    ConstantSeries,

    #[error("records do not share a time grid")]
    GridMismatch,

    #[error("empty sample batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::Step { step, source: Box::new(self) }
    }
}
