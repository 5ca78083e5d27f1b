use thiserror::Error;

/// Errors raised by the kernels, fields and solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GsqgError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("kernel singularity: {0}")]
    Singularity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("incompatible grids: {0}")]
    Incompatible(String),
    #[error("multiplier bracket failure: {0}")]
    MultiplierBracket(String),
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("computational domain too small: {0}")]
    DomainTooSmall(String),
    #[error("constraint active: {0}")]
    ConstraintActive(String),
    #[error("regime error: {0}")]
    Regime(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("degenerate constant: {0}")]
    DegenerateConstant(String),
    #[error("CFL violation: {0}")]
    Cfl(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, GsqgError>;

impl From<std::io::Error> for GsqgError {
    fn from(e: std::io::Error) -> Self {
        GsqgError::Io(e.to_string())
    }
}
