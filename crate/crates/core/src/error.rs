use thiserror::Error;

use crate::cfa::CfaFit;
use crate::efa::InitialEstimate;
use crate::lasso::LassoResult;
use crate::rotation::RotationResult;

/// The best iterate reached by a solver that ran out of iterations.
#[derive(Debug, Clone)]
pub enum BestIterate {
    Initial(InitialEstimate),
    Rotation(RotationResult),
    Lasso(LassoResult),
    Cfa(CfaFit),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("implied covariance is numerically singular (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("column {column} has norm below 1e-12")]
    DegenerateColumn { column: usize },

    #[error("solver did not converge within {max_iter} iterations")]
    NotConverged { max_iter: usize, best: Box<BestIterate> },

    #[error("model is not identified (information condition number {condition:.3e})")]
    NonIdentified { condition: f64, fit: Box<CfaFit> },

    #[error("standard errors unavailable: information matrix is not invertible")]
    NoStandardErrors,

    #[error("sandwich information requires raw data, only a covariance matrix was supplied")]
    RequiresRawData,

    #[error("degenerate pattern: {0}")]
    DegeneratePattern(String),

    #[error("no admissible model among {candidates} candidate thresholds")]
    NoAdmissibleModel { candidates: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Recovers the best iterate carried by a non-convergence error.
    pub fn into_best(self) -> Option<BestIterate> {
        match self {
            Error::NotConverged { best, .. } => Some(*best),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
