use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters or configuration rejected at construction.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation failed on path {path} at step {step}: {reason}")]
    Simulation {
        path: usize,
        step: usize,
        reason: String,
    },

    #[error(
        "non-positive state on path {path} at step {step} under the Euler scheme; use the log-Euler scheme"
    )]
    Positivity { path: usize, step: usize },

    #[error("time step {dt:.3e} violates the stability bound; admissible dt <= {admissible_dt:.3e} ({reason})")]
    Stability {
        dt: f64,
        admissible_dt: f64,
        reason: String,
    },

    #[error("PSOR did not converge at time step {step}, w-line {line}: residual {residual:.3e} after {iterations} iterations")]
    Psor {
        step: usize,
        line: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("regression failed at exercise date {date}: {reason}")]
    Regression { date: usize, reason: String },

    #[error("exercise boundary not bracketed at slice {slice}, z-column {column}; widen the w range")]
    BoundaryNotBracketed { slice: usize, column: usize },

    #[error("query outside grid coverage: {0}")]
    Extrapolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Name of the module that raised the error, used by the CLI when
    /// reporting numerical failures.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Domain(_) | Error::Config(_) => "config",
            Error::Simulation { .. } | Error::Positivity { .. } => "sim",
            Error::Stability { .. } | Error::Psor { .. } => "pde",
            Error::Regression { .. } => "lsmc",
            Error::BoundaryNotBracketed { .. } | Error::Extrapolation(_) => "boundary",
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => "io",
        }
    }

    /// True for errors caused by malformed input rather than a numerical
    /// failure. A step size outside the stability bound is a property of the
    /// requested grid, so it counts as input.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Config(_) | Error::Json(_) | Error::Stability { .. })
    }
}
