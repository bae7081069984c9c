use thiserror::Error;

/// Errors raised anywhere in the fitting and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("csv error at row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate propensity: all observed treatments are identical")]
    DegeneratePropensity,

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no grid value satisfies the selection rule: {0}")]
    NoSelection(String),

    #[error("every fit failed: {0}")]
    AllFitsFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::Infeasible(_)
                | Error::NotPsd { .. }
                | Error::Numerical(_)
                | Error::AllFitsFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
