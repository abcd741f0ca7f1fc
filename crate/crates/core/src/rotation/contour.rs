use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::criteria::lp_value;
use super::oblique::rotate_loadings;
use crate::error::{Error, Result};
use crate::model::LoadingMatrix;

/// `T(θ1, θ2) = [[cos θ1, sin θ2], [sin θ1, cos θ2]]`; every 2×2 oblique
/// rotation has this form.
pub fn rotation_2x2(theta1: f64, theta2: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta1.cos(), theta2.sin(), theta1.sin(), theta2.cos()])
}

/// Objective values over a uniform grid on `[0, 2π)²`. Entry `(i, j)` is the
/// value at `(thetas[i], thetas[j])`; near-singular rotations hold NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourGrid {
    pub thetas: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl ContourGrid {
    /// Grid cell with the smallest finite value, as `(i, j, value)`.
    pub fn minimum(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::INFINITY);
        let n = self.thetas.len();
        for i in 0..n {
            for j in 0..n {
                let v = self.values[(i, j)];
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        best
    }

    /// The eight points equivalent to `(0, 0)` under column permutation and
    /// sign flips: `{0, π}²` and `{π/2, 3π/2}²`.
    pub fn identity_images() -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(8);
        for &(a, b) in &[(0.0, PI), (0.5 * PI, 1.5 * PI)] {
            for &t1 in &[a, b] {
                for &t2 in &[a, b] {
                    out.push((t1, t2));
                }
            }
        }
        out
    }

    /// Distance in grid cells from `(i, j)` to the nearest identity image,
    /// measured on the torus.
    pub fn cells_from_identity_image(&self, i: usize, j: usize) -> f64 {
        let n = self.thetas.len() as f64;
        let h = 2.0 * PI / n;
        let wrap = |d: f64| {
            let d = d.rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d) / h
        };
        Self::identity_images()
            .into_iter()
            .map(|(a, b)| wrap(self.thetas[i] - a).max(wrap(self.thetas[j] - b)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Scans `Q_p(Λ* T(θ1, θ2)'^{-1})` over a `grid × grid` lattice.
pub fn contour_scan_2x2(lambda_star: &LoadingMatrix, p: f64, grid: usize) -> Result<ContourGrid> {
    if lambda_star.n_factors() != 2 {
        return Err(Error::InvalidInput("contour scan needs exactly two factors".into()));
    }
    if grid < 2 {
        return Err(Error::InvalidInput("grid must have at least two points".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("p must lie in (0, 1], got {p}")));
    }
    let thetas: Vec<f64> = (0..grid).map(|i| 2.0 * PI * i as f64 / grid as f64).collect();
    let a = lambda_star.as_matrix();
    let values = DMatrix::from_fn(grid, grid, |i, j| {
        let t = rotation_2x2(thetas[i], thetas[j]);
        // det T = cos(θ1 + θ2)
        if (thetas[i] + thetas[j]).cos().abs() < 1e-8 {
            return f64::NAN;
        }
        match rotate_loadings(a, &t) {
            Some(l) => lp_value(&l, p),
            None => f64::NAN,
        }
    });
    Ok(ContourGrid { thetas, values })
}
