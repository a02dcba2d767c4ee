use thiserror::Error;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (pivot {pivot:.3e} at step {step}, tolerance {tolerance:.3e})")]
    NotPositiveDefinite {
        step: usize,
        pivot: f64,
        tolerance: f64,
    },

    #[error("determinant is singular (zero pivot at step {step})")]
    SingularDeterminant { step: usize },

    #[error("ode integration diverged at s = {at}")]
    IntegrationDiverged { at: f64 },

    #[error("Carleson condition violated: {0}")]
    CarlesonViolated(String),

    #[error("degenerate discretization: nodes {a} and {b} coincide")]
    DegenerateDiscretization { a: f64, b: f64 },

    #[error("kernel exponent {exponent:.1} exceeds the guard {limit} at x = {x}, t = {t}")]
    ExponentOverflow {
        exponent: f64,
        limit: f64,
        x: f64,
        t: f64,
    },

    #[error("no plateau detected: {0}")]
    InconclusiveAsymptotics(String),

    #[error("spectral data would become negative: {0}")]
    DataPositivityViolated(String),

    #[error("bound violated at x = {x}: q = {q} not in ({lower}, {upper})")]
    BoundViolated {
        x: f64,
        q: f64,
        lower: f64,
        upper: f64,
    },

    #[error("seed potential does not decay: |q({x_max})| = {value:.3e} exceeds {tolerance:.1e}")]
    TailNotNegligible {
        x_max: f64,
        value: f64,
        tolerance: f64,
    },

    #[error("inconclusive: {0}")]
    Inconclusive(String),
}

pub type Result<T> = std::result::Result<T, Error>;
