use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ObliqueRotationMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{rounding_slack, LineSearch};

/// `Proj(M) = M diag(M'M)^{-1/2}`: rescales every column to unit length.
pub fn oblique_project(m: &DMatrix<f64>) -> Result<ObliqueRotationMatrix> {
    if !m.is_square() {
        return Err(Error::InvalidInput("rotation must be square".into()));
    }
    let out = normalize_columns(m)?;
    if linalg::relative_min_singular(&out) <= 1e-10 {
        return Err(Error::RankDeficient("projected matrix is singular".into()));
    }
    Ok(ObliqueRotationMatrix::from_normalized(out))
}

pub(crate) fn normalize_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (c, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateColumn { column: c });
        }
        col.scale_mut(1.0 / norm);
    }
    Ok(out)
}

/// `Λ = A T'^{-1}`, or `None` when T is numerically singular.
pub fn rotate_loadings(a: &DMatrix<f64>, t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if t.determinant().abs() < 1e-12 {
        return None;
    }
    linalg::right_solve_transpose(a, t)
}

/// Gradient with respect to T of a criterion of `Λ = A T'^{-1}` whose
/// gradient with respect to Λ is `gq`: `-T'^{-1} gq' Λ`.
pub fn rotation_gradient(lambda: &DMatrix<f64>, gq: &DMatrix<f64>, t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    // -T'^{-1} X  with X = gq' Λ, via solving T' Y = X
    let x = gq.transpose() * lambda;
    let y = t.transpose().lu().solve(&x)?;
    Some(-y)
}

/// Component of `g` tangent to the oblique manifold at T:
/// `g - T diag(T' g)`.
pub(crate) fn tangent_projection(t: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for c in 0..t.ncols() {
        let d = t.column(c).dot(&g.column(c));
        let tc = t.column(c).into_owned();
        out.column_mut(c).axpy(-d, &tc, 1.0);
    }
    out
}

/// Uniformly oriented random oblique rotation.
pub fn random_oblique<R: Rng + ?Sized>(k: usize, rng: &mut R) -> ObliqueRotationMatrix {
    loop {
        let m = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Ok(t) = oblique_project(&m) {
            if linalg::relative_min_singular(t.as_matrix()) > 1e-3 {
                return t;
            }
        }
    }
}

pub(crate) struct StepOutcome {
    pub t: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

/// Backtracking search along `T - α grad`, projected back onto the manifold,
/// accepting the first α with `f(new) <= f0 - c α ||tangent||²`.
pub(crate) fn projected_search<F>(
    a: &DMatrix<f64>,
    t: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    tangent_sq: f64,
    f0: f64,
    ls: &LineSearch,
    mut objective: F,
) -> Option<StepOutcome>
where
    F: FnMut(&DMatrix<f64>) -> f64,
{
    let mut step = ls.initial_step;
    for _ in 0..=ls.max_halvings {
        let candidate = t - grad * step;
        if let Ok(tn) = normalize_columns(&candidate) {
            if let Some(ln) = rotate_loadings(a, &tn) {
                let value = objective(&ln);
                if value.is_finite() && value <= f0 - ls.sufficient_decrease * step * tangent_sq + rounding_slack(f0) {
                    return Some(StepOutcome { t: tn, lambda: ln });
                }
            }
        }
        step *= ls.shrink;
    }
    None
}
