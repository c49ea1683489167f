use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid degree {degree} for forms on a {dim}-dimensional space")]
    InvalidDegree { degree: usize, dim: usize },

    #[error("3-form is degenerate (det B = {det_b:e}); not a G2-structure at this point")]
    DegenerateForm { det_b: f64 },

    #[error("metric is singular or not positive-definite (det = {det:e})")]
    SingularMetric { det: f64 },

    #[error("ill-conditioned chart: {0}")]
    IllConditioned(String),

    #[error("vanishing denominator in residue (|df/dz_e| = {0:e})")]
    VanishingDenominator(f64),

    #[error("non-positive volume ratio estimate kappa = {0}")]
    NonPositiveKappa(f64),

    #[error("form evaluator failed at stencil coordinate {coord} (offset {offset:+e}): {reason}")]
    Evaluator {
        coord: usize,
        offset: f64,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
