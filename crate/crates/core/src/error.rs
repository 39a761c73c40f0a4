use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("weight matrix is not symmetric positive definite: {0}")]
    InvalidWeight(String),

    #[error("operation is undefined at the origin")]
    UndefinedAtOrigin,

    #[error("pair (A, B) is not controllable: controllability rank {rank} < {n}")]
    NotControllable { rank: usize, n: usize },

    #[error("homogenization equation has no solution (residual {residual:.3e} exceeds {tolerance:.3e})")]
    NoSolution { residual: f64, tolerance: f64 },

    #[error("homogenization is singular: G0 - I is not invertible")]
    HomogenizationSingular,

    #[error("LMI infeasible after budget: best margin {best_margin:.3e} ({detail})")]
    Infeasible { best_margin: f64, detail: String },

    #[error("matrix is numerically singular and cannot be inverted: {0}")]
    CannotInvert(String),

    #[error("certificate preconditions violated: {0}")]
    NotCertified(String),

    #[error("angle out of range: {0}")]
    InvalidAngle(String),

    #[error("bit budget {budget} too small for dimension {n}: {bins} bins per polar angle (need at least 3)")]
    BudgetTooSmall { n: usize, budget: u64, bins: u64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("trajectory diverged at t = {t}: |x| = {norm:.3e}")]
    Divergence { t: f64, norm: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}
