use thiserror::Error;

/// Errors produced by estimation, inference and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input shapes or values violate a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// The sample has fewer instruments than regressors.
    #[error("under-identified: q < p (q = {q}, p = {p})")]
    UnderIdentified { p: usize, q: usize },

    /// Y, X and Z disagree on the number of observations.
    #[error("row count mismatch: {0}")]
    RowMismatch(String),

    /// A data matrix contains NaN or an infinity.
    #[error("non-finite entry in {name} at row {row}, column {col}")]
    NonFinite { name: &'static str, row: usize, col: usize },

    /// A quadratic Lasso coordinate with zero curvature has a linear term
    /// larger than the penalty, so the objective is unbounded below.
    #[error("unbounded coordinate {index}: Q_jj = 0 and |c_j| = {c} > penalty {penalty}")]
    UnboundedCoordinate { index: usize, c: f64, penalty: f64 },

    /// Coordinate descent exhausted its sweep budget.
    #[error("coordinate descent did not converge in {sweeps} sweeps (kkt residual {kkt_residual:e})")]
    NotConverged { sweeps: usize, kkt_residual: f64 },

    /// A nodewise residual scale was not strictly positive.
    #[error("degenerate nodewise regression at index {index}: tau^2 = {tau_sq:e}")]
    DegenerateNode { index: usize, tau_sq: f64 },

    /// A regularized inverse broke its finite-sample KKT bound.
    #[error("certificate violated for {estimate} row {row}: observed {observed:e} > bound {bound:e}")]
    CertificateViolated {
        estimate: &'static str,
        row: usize,
        observed: f64,
        bound: f64,
    },

    /// A matrix that must be inverted is singular or badly conditioned.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// The minimal eigenvalue of the identification Gram is not positive.
    #[error("loss of identification: minimal eigenvalue {0:e} is not positive")]
    NotIdentified(f64),

    /// The scaled Lasso noise level collapsed below its floor.
    #[error("degenerate noise estimate: sigma = {0:e}")]
    DegenerateNoise(f64),

    /// A quadratic form that must be non-negative came out negative.
    #[error("broken covariance: a'Omega a = {0:e} < 0")]
    NegativeVariance(f64),

    /// Cross-validation could not be carried out.
    #[error("cross-validation: {0}")]
    CrossValidation(String),

    /// Every Monte Carlo replication failed.
    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),
}

impl Error {
    /// True for failures caused by the numbers rather than by the shape of the
    /// inputs (singularity, non-convergence, degenerate scales).
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::Validation(_) | Error::UnderIdentified { .. } | Error::RowMismatch(_) | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
