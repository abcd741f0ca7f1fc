//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Matrices with a condition number above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

/// Condition number `max|eig| / min|eig|` of a symmetric matrix; infinite when
/// the matrix has a non-positive eigenvalue.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let vals = sym_eigenvalues(m);
    match (vals.first(), vals.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

/// Inverts an SPD matrix through its Cholesky factor.
///
/// The squared ratio of the largest to smallest Cholesky pivot bounds the
/// condition number from below; only when that bound looks suspicious is the
/// exact spectral condition number computed.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<SpdInverse> {
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => {
            return Err(Error::SingularCovariance {
                condition: f64::INFINITY,
            })
        }
    };
    let l = chol.l_dirty();
    let n = m.nrows();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    let mut log_det = 0.0;
    for i in 0..n {
        let d = l[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
        log_det += 2.0 * d.ln();
    }
    let pivot_bound = (hi / lo).powi(2);
    if !pivot_bound.is_finite() || pivot_bound > 1e8 {
        let condition = sym_condition(m);
        if condition > SINGULAR_CONDITION {
            return Err(Error::SingularCovariance { condition });
        }
    }
    Ok(SpdInverse {
        inverse: chol.inverse(),
        log_det,
    })
}

/// Solves `X T' = A` for `X`, i.e. returns `A (T')^{-1}`.
pub fn right_solve_transpose(a: &DMatrix<f64>, t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    // X T' = A  <=>  T X' = A'
    let lu = t.clone().lu();
    let xt = lu.solve(&a.transpose())?;
    if xt.iter().all(|v| v.is_finite()) {
        Some(xt.transpose())
    } else {
        None
    }
}

/// Smallest singular value divided by the largest.
pub fn relative_min_singular(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let hi = sv.iter().cloned().fold(0.0_f64, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}
