use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("kernel is singular at t = 0")]
    SingularAtZero,
    #[error("operation not defined for this kernel variant: {0}")]
    WrongVariant(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Picard iteration did not converge after {iterations} iterations (last residual {last_residual:e})")]
    NoConvergence { iterations: usize, last_residual: f64 },
    #[error("square root of negative iterate {value:e} at node {node}, component {component}")]
    NegativeArgument { node: usize, component: usize, value: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("covariance factorization failed after regularization")]
    FactorizationFailure,
    #[error("closed-form rate not applicable: {0}")]
    NotApplicable(String),
    #[error("path is negative ({value:e}) at node {node}")]
    NegativePath { node: usize, value: f64 },
    #[error("degenerate coefficients: {0}")]
    DegenerateCoefficients(String),
    #[error("variational solver failed: best value {best_value}, constraint violation {violation:e}")]
    SolverFailure { best_value: f64, violation: f64 },
    #[error("diagonal entry L[{0}][{0}] is zero")]
    SingularL(usize),
    #[error("price {price} outside ({lower}, {upper})")]
    PriceOutOfBounds { price: f64, lower: f64, upper: f64 },
    #[error("rate unavailable: {0}")]
    RateUnavailable(String),
    #[error("only {hits} event hits at eps = {eps} (need 20); use importance sampling")]
    InsufficientHits { eps: f64, hits: usize },
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
}
