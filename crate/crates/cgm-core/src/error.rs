//! Crate-wide error type.

/// Errors produced by the numerical and control layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Input contains NaN or infinite entries.
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    /// An iterative numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A matrix required to be positive semidefinite is not.
    #[error("matrix not positive semidefinite: min eigenvalue {min_eig:.3e} below -{tol:.3e}")]
    NotPsd { min_eig: f64, tol: f64 },

    /// A matrix required to be nonsingular is singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Simulation state left the representable range.
    #[error("trajectory diverged: {0}")]
    Divergence(String),

    /// Not enough data to build the requested object.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A constructed model violates its invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Closed-loop run failed (infeasible QP or similar).
    #[error("closed-loop failure at step {step}: {reason}")]
    ClosedLoop { step: usize, reason: String },

    /// Persistence I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Persistence format failure.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
