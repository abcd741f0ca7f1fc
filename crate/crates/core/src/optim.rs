//! Box-constrained quasi-Newton minimiser (projected BFGS with an
//! Armijo backtracking line search) used by the ML fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Backtracking constants shared by every line search in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_halvings: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 50,
        }
    }
}

impl LineSearch {
    /// Constants for the rotation solvers. The stricter sufficient-decrease
    /// constant keeps accepted steps below `1/L` on the locally quadratic
    /// surrogate, which avoids the slow zigzag that steps near `2/L` cause.
    pub fn rotation() -> Self {
        Self {
            sufficient_decrease: 0.5,
            ..Self::default()
        }
    }
}

/// Slack allowed in a sufficient-decrease test so that steps whose effect is
/// below floating-point resolution of `f` are not rejected outright.
pub(crate) fn rounding_slack(f: f64) -> f64 {
    8.0 * f64::EPSILON * (1.0 + f.abs())
}

#[derive(Debug, Clone)]
pub struct BoxBfgsOptions {
    /// Convergence tolerance on the max-norm of the projected gradient.
    pub tol: f64,
    pub max_iter: usize,
    pub line_search: LineSearch,
}

impl Default for BoxBfgsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 5000,
            line_search: LineSearch::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxBfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient_norm: f64,
}

/// Projected gradient: components pushing against an active bound are zeroed.
pub fn projected_gradient(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
            0.0
        } else {
            g[i]
        }
    })
}

fn clamp(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lower[i], upper[i]))
}

/// Minimises `f` over the box `[lower, upper]`.
///
/// `f` returns the value and gradient, or an error when the point lies
/// outside the function's domain; such points are treated as infinitely bad
/// during the line search. An error at the starting point is propagated.
pub fn minimize_box<F>(
    mut f: F,
    x0: DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &BoxBfgsOptions,
) -> Result<BoxBfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = clamp(&x0, lower, upper);
    let (mut fx, mut g) = f(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut first_update = true;
    let ls = opts.line_search;

    let mut iterations = 0;
    loop {
        let pg = projected_gradient(&x, &g, lower, upper);
        let pg_norm = pg.amax();
        if pg_norm < opts.tol {
            return Ok(BoxBfgsOutcome {
                x,
                value: fx,
                gradient: g,
                iterations,
                converged: true,
                projected_gradient_norm: pg_norm,
            });
        }
        if iterations >= opts.max_iter {
            return Ok(BoxBfgsOutcome {
                x,
                value: fx,
                gradient: g,
                iterations,
                converged: false,
                projected_gradient_norm: pg_norm,
            });
        }
        iterations += 1;

        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = -(&h * &pg);
            for i in 0..n {
                if !free[i] {
                    d[i] = 0.0;
                }
            }
            if g.dot(&d) >= 0.0 {
                h.fill_with_identity();
                h_is_identity = true;
                d = -pg.clone();
            }
            // keep the very first trial step of unit size in max-norm
            let mut step = if h_is_identity {
                ls.initial_step / d.amax().max(1.0)
            } else {
                ls.initial_step
            };
            for _ in 0..=ls.max_halvings {
                let trial = clamp(&(&x + &d * step), lower, upper);
                let s = &trial - &x;
                if s.amax() == 0.0 {
                    break;
                }
                if let Ok((ft, gt)) = f(&trial) {
                    if ft.is_finite() && ft <= fx + ls.sufficient_decrease * g.dot(&s) + rounding_slack(fx) {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                step *= ls.shrink;
            }
            if accepted.is_some() || h_is_identity || attempt == 1 {
                break;
            }
            h.fill_with_identity();
            h_is_identity = true;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            let converged = pg_norm < opts.tol;
            return Ok(BoxBfgsOutcome {
                x,
                value: fx,
                gradient: g,
                iterations,
                converged,
                projected_gradient_norm: pg_norm,
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if first_update {
                let scale = sy / y.dot(&y);
                h = DMatrix::identity(n, n) * scale;
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h_is_identity = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Ok((v, g))
        };
        let inf = DVector::from_element(2, f64::INFINITY);
        let out = minimize_box(
            f,
            DVector::from_vec(vec![-1.2, 1.0]),
            &(-&inf),
            &inf,
            &BoxBfgsOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn respects_bounds() {
        // min (x+1)^2 + (y-2)^2 on x >= 0, y <= 1
        let f = |x: &DVector<f64>| {
            Ok((
                (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2),
                DVector::from_vec(vec![2.0 * (x[0] + 1.0), 2.0 * (x[1] - 2.0)]),
            ))
        };
        let lower = DVector::from_vec(vec![0.0, f64::NEG_INFINITY]);
        let upper = DVector::from_vec(vec![f64::INFINITY, 1.0]);
        let out = minimize_box(
            f,
            DVector::from_vec(vec![3.0, -3.0]),
            &lower,
            &upper,
            &BoxBfgsOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.x[0], 0.0);
        assert_eq!(out.x[1], 1.0);
    }
}
