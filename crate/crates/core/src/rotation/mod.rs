//! Oblique rotation: the L^p component-loss criterion solved by iteratively
//! reweighted gradient projection, plus smooth baseline criteria solved by
//! plain gradient projection.

mod contour;
mod criteria;
mod gp;
mod irgp;
mod oblique;

pub use contour::{contour_scan_2x2, rotation_2x2, ContourGrid};
pub use criteria::{clf_smoothed_value, clf_value, criterion_value_and_gradient, lp_weights};
pub use gp::{rotate_gp_smooth, GpOptions};
pub use irgp::{rotate_irgp, IrgpOptions};
pub use oblique::{oblique_project, random_oblique, rotate_loadings, rotation_gradient};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{FactorCovariance, LoadingMatrix};

/// An invertible K×K matrix with `diag(T'T) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObliqueRotationMatrix(DMatrix<f64>);

impl ObliqueRotationMatrix {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        if !t.is_square() || t.nrows() == 0 {
            return Err(Error::InvalidInput("rotation must be a non-empty square matrix".into()));
        }
        for (c, col) in t.column_iter().enumerate() {
            if (col.norm_squared() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "column {c} of the rotation does not have unit norm"
                )));
            }
        }
        if linalg::relative_min_singular(&t) <= 1e-10 {
            return Err(Error::RankDeficient("rotation matrix is singular".into()));
        }
        Ok(Self(t))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    pub(crate) fn from_normalized(t: DMatrix<f64>) -> Self {
        Self(t)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn factor_cov(&self) -> FactorCovariance {
        FactorCovariance::from_rotation(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RotationCriterion {
    /// `Σ |λ|^p`.
    Lp {
        p: f64,
    },
    /// `Σ (ε² + λ²)^{p/2}`.
    LpSmoothed {
        p: f64,
        epsilon: f64,
    },
    Quartimin,
    Geomin {
        geomin_eps: f64,
    },
}

impl RotationCriterion {
    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64| {
            if p > 0.0 && p <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("p must lie in (0, 1], got {p}")))
            }
        };
        match *self {
            RotationCriterion::Lp { p } => check_p(p),
            RotationCriterion::LpSmoothed { p, epsilon } => {
                check_p(p)?;
                if epsilon > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidInput("epsilon must be positive".into()))
                }
            }
            RotationCriterion::Quartimin => Ok(()),
            RotationCriterion::Geomin { geomin_eps } => {
                if geomin_eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidInput("geomin epsilon must be positive".into()))
                }
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, RotationCriterion::Lp { .. })
    }

    pub fn name(&self) -> String {
        match *self {
            RotationCriterion::Lp { p } => format!("lp(p={p})"),
            RotationCriterion::LpSmoothed { p, epsilon } => format!("lp_smoothed(p={p},eps={epsilon})"),
            RotationCriterion::Quartimin => "quartimin".into(),
            RotationCriterion::Geomin { geomin_eps } => format!("geomin(eps={geomin_eps})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    /// Λ̂ = Â T̂'^{-1}.
    pub rotated_loadings: LoadingMatrix,
    /// Φ̂ = T̂'T̂.
    pub factor_cov: FactorCovariance,
    pub rotation: ObliqueRotationMatrix,
    /// Value of the criterion actually minimised (Q_{p,ε} for the L^p solver).
    pub objective: f64,
    /// Unsmoothed Q_p at the solution, for the L^p solver.
    pub lp_objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient_norm: f64,
    pub trace: Option<Vec<(usize, f64)>>,
}

/// Pre-flight checks shared by the solvers.
pub(crate) fn check_loadings(a: &LoadingMatrix) -> Result<()> {
    if linalg::relative_min_singular(a.as_matrix()) <= 1e-10 {
        return Err(Error::RankDeficient(format!(
            "unrotated loadings do not have rank {}",
            a.n_factors()
        )));
    }
    Ok(())
}
