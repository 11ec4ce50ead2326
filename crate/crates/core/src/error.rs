use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("zero normalizer at observation z = {z}: observation incompatible with predicted support")]
    ZeroNormalizer { z: f64 },

    #[error("extremal index undefined: ball has zero smeared measure")]
    UndefinedIndex,

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("degenerate variance estimate {0:e}")]
    DegenerateVariance(f64),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse { .. } => "parse",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvariantViolation(_) => "invariant_violation",
            Error::NonConvergence { .. } => "non_convergence",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::ZeroNormalizer { .. } => "zero_normalizer",
            Error::UndefinedIndex => "undefined_index",
            Error::AssumptionViolation(_) => "assumption_violation",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::NoSolution(_) => "no_solution",
            Error::Optimization(_) => "optimization",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Io(_) => "io",
        }
    }

    /// Failures of statistical or modelling assumptions discovered at run time,
    /// as opposed to bad input.
    pub fn is_runtime_statistical(&self) -> bool {
        matches!(
            self,
            Error::ZeroNormalizer { .. }
                | Error::UndefinedIndex
                | Error::AssumptionViolation(_)
                | Error::DegenerateVariance(_)
                | Error::NonConvergence { .. }
                | Error::NoSolution(_)
                | Error::Optimization(_)
                | Error::InvariantViolation(_)
        )
    }
}
