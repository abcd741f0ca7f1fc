//! L^1-regularised EFA by proximal gradient: a soft-thresholding step on Λ,
//! a projected step on the upper-triangular T (Φ = T'T) and a floored
//! gradient step on `v = log ω`, all sharing one backtracked step size.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::efa::{heywood_floor, principal_factor_start};
use crate::error::{BestIterate, Error, Result};
use crate::model::{
    discrepancy_eval, implied_cov_raw, mask_upper, reparam_gradients, FactorModelParams, ReparamParams,
    SampleCovariance,
};
use crate::optim::{rounding_slack, LineSearch};
use crate::rotation::oblique_project;

#[derive(Debug, Clone)]
pub struct LassoOptions {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub line_search: LineSearch,
    pub start: Option<ReparamParams>,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            tol: 1e-6,
            max_iter: 20_000,
            line_search: LineSearch::default(),
            start: None,
        }
    }
}

impl LassoOptions {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoResult {
    pub params: FactorModelParams,
    /// Upper-triangular T with `Φ = T'T`.
    pub t: DMatrix<f64>,
    pub gamma: f64,
    /// `L + γ Σ|λ_jk|`.
    pub objective: f64,
    /// `γ Σ|λ_jk|`.
    pub penalty_part: f64,
    pub discrepancy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fixed-point residual at termination.
    pub residual: f64,
    pub trace: Option<Vec<(usize, f64)>>,
}

impl LassoResult {
    pub fn reparam(&self) -> ReparamParams {
        ReparamParams {
            loadings: self.params.loadings.as_matrix().clone(),
            t: self.t.clone(),
            log_uniq: self.params.uniqueness.log(),
        }
    }
}

/// Entrywise `sign(λ) max(|λ| - κ, 0)`, the proximal map of `κ Σ|λ_jk|`.
pub fn soft_threshold(lambda: &DMatrix<f64>, kappa: f64) -> DMatrix<f64> {
    lambda.map(|x| x.signum() * (x.abs() - kappa).max(0.0))
}

fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

struct Point {
    x: ReparamParams,
    smooth: f64,
    objective: f64,
}

fn evaluate(x: ReparamParams, s: &DMatrix<f64>, gamma: f64) -> Result<(Point, crate::model::ReparamGradients)> {
    let phi = x.phi();
    let omega = x.omega();
    let sigma = implied_cov_raw(&x.loadings, &phi, &omega);
    let eval = discrepancy_eval(&sigma, s)?;
    let grads = reparam_gradients(&x, &phi, &omega, &eval.m);
    let objective = eval.value + gamma * l1_norm(&x.loadings);
    Ok((
        Point {
            x,
            smooth: eval.value,
            objective,
        },
        grads,
    ))
}

fn value_only(x: &ReparamParams, s: &DMatrix<f64>, gamma: f64) -> Option<f64> {
    let sigma = x.implied_covariance();
    let eval = discrepancy_eval(&sigma, s).ok()?;
    Some(eval.value + gamma * l1_norm(&x.loadings))
}

/// Starting point used when none is supplied: principal-factor loadings,
/// `T = I` and the matching log-uniquenesses.
pub fn default_start(sample: &SampleCovariance, k: usize) -> Result<ReparamParams> {
    let (a0, v0) = principal_factor_start(sample, k)?;
    Ok(ReparamParams {
        loadings: a0,
        t: DMatrix::identity(k, k),
        log_uniq: v0,
    })
}

fn check_start(x: &ReparamParams, j: usize, k: usize) -> Result<()> {
    if x.loadings.shape() != (j, k) || x.t.shape() != (k, k) || x.log_uniq.len() != j {
        return Err(Error::DimensionMismatch("lasso start has wrong dimensions".into()));
    }
    Ok(())
}

/// Proximal gradient fit of `L(Σ(Λ, T, v)) + γ Σ|λ_jk|`.
pub fn fit_lasso(sample: &SampleCovariance, k: usize, opts: &LassoOptions) -> Result<LassoResult> {
    fit_lasso_impl(sample, k, opts, false)
}

/// As [`fit_lasso`], additionally recording the composite objective after
/// every accepted step.
pub fn fit_lasso_traced(sample: &SampleCovariance, k: usize, opts: &LassoOptions) -> Result<LassoResult> {
    fit_lasso_impl(sample, k, opts, true)
}

fn fit_lasso_impl(sample: &SampleCovariance, k: usize, opts: &LassoOptions, record_trace: bool) -> Result<LassoResult> {
    let j = sample.dim();
    if k == 0 || k > j {
        return Err(Error::InvalidInput(format!(
            "number of factors must satisfy 1 <= K <= J, got K={k}, J={j}"
        )));
    }
    if !(opts.gamma >= 0.0) || !opts.gamma.is_finite() {
        return Err(Error::InvalidInput("gamma must be non-negative".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let start = match &opts.start {
        Some(x) => {
            check_start(x, j, k)?;
            x.clone()
        }
        None => default_start(sample, k)?,
    };
    let s = sample.as_matrix();
    let gamma = opts.gamma;
    let floor = heywood_floor(sample);
    let ls = opts.line_search;

    let mut start = start;
    let mut t0 = start.t.clone();
    mask_upper(&mut t0);
    start.t = oblique_project(&t0)?.into_inner();
    start.log_uniq = start.log_uniq.map(|v| v.max(floor));
    let (mut cur, mut grads) = evaluate(start, s, gamma)?;
    let mut trace = record_trace.then(|| vec![(0, cur.objective)]);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    loop {
        let smooth_norm = smooth_block_norm(&cur.x, &grads, floor);
        if iterations >= opts.max_iter || residual < opts.tol {
            break;
        }
        iterations += 1;
        let mut step = ls.initial_step;
        let mut accepted = None;
        for _ in 0..=ls.max_halvings {
            if let Some(cand) = prox_step(&cur.x, &grads, step, gamma, floor) {
                let d2 = (&cand.loadings - &cur.x.loadings).norm_squared()
                    + (&cand.t - &cur.x.t).norm_squared()
                    + (&cand.log_uniq - &cur.x.log_uniq).norm_squared();
                if d2 == 0.0 {
                    accepted = Some((cand, step, 0.0));
                    break;
                }
                if let Some(f) = value_only(&cand, s, gamma) {
                    if f <= cur.objective - ls.sufficient_decrease / step * d2 + rounding_slack(cur.objective) {
                        accepted = Some((cand, step, d2));
                        break;
                    }
                }
            }
            step *= ls.shrink;
        }
        let Some((cand, step, _)) = accepted else {
            debug!("lasso line search failed at iteration {iterations}");
            residual = smooth_norm;
            break;
        };
        let d_lambda = (&cand.loadings - &cur.x.loadings).norm() / step;
        residual = d_lambda + smooth_norm;
        let (next, g_next) = evaluate(cand, s, gamma)?;
        cur = next;
        grads = g_next;
        if let Some(tr) = trace.as_mut() {
            tr.push((iterations, cur.objective));
        }
    }

    let converged = residual < opts.tol;
    let penalty_part = gamma * l1_norm(&cur.x.loadings);
    let result = LassoResult {
        params: cur.x.to_params()?,
        t: cur.x.t.clone(),
        gamma,
        objective: cur.objective,
        penalty_part,
        discrepancy: cur.smooth,
        iterations,
        converged,
        residual,
        trace,
    };
    if converged {
        Ok(result)
    } else {
        Err(Error::NotConverged {
            max_iter: opts.max_iter,
            best: Box::new(BestIterate::Lasso(result)),
        })
    }
}

/// Norms of the T gradient tangent to the constraint set and of the v
/// gradient with floored coordinates that push outward removed.
fn smooth_block_norm(x: &ReparamParams, g: &crate::model::ReparamGradients, floor: f64) -> f64 {
    let mut gt = g.t.clone();
    for c in 0..gt.ncols() {
        let d = x.t.column(c).dot(&gt.column(c));
        let tc = x.t.column(c).into_owned();
        gt.column_mut(c).axpy(-d, &tc, 1.0);
    }
    mask_upper(&mut gt);
    // the leading column of an upper-triangular unit-column T is fixed
    gt.column_mut(0).fill(0.0);
    let gv = DVector::from_fn(g.log_uniq.len(), |i, _| {
        if x.log_uniq[i] <= floor && g.log_uniq[i] > 0.0 {
            0.0
        } else {
            g.log_uniq[i]
        }
    });
    gt.norm() + gv.norm()
}

fn prox_step(
    x: &ReparamParams,
    g: &crate::model::ReparamGradients,
    step: f64,
    gamma: f64,
    floor: f64,
) -> Option<ReparamParams> {
    let loadings = soft_threshold(&(&x.loadings - &g.loadings * step), step * gamma);
    let mut t = &x.t - &g.t * step;
    mask_upper(&mut t);
    let t = oblique_project(&t).ok()?.into_inner();
    let log_uniq = (&x.log_uniq - &g.log_uniq * step).map(|v| v.max(floor));
    Some(ReparamParams { loadings, t, log_uniq })
}

fn has_zero_column(m: &DMatrix<f64>) -> bool {
    m.column_iter().any(|c| c.iter().all(|&x| x == 0.0))
}

/// Warm-started fits along a descending sequence of γ values. A fit whose
/// loadings contain an all-zero column is a poor warm start (Λ = 0 is
/// stationary for its column), so the next γ restarts from the default
/// start instead.
pub fn lasso_path(
    sample: &SampleCovariance,
    k: usize,
    gammas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<Result<LassoResult>>> {
    if gammas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidInput("gammas must be sorted in descending order".into()));
    }
    let mut out = Vec::with_capacity(gammas.len());
    let mut warm: Option<ReparamParams> = opts.start.clone();
    for &gamma in gammas {
        let local = LassoOptions {
            gamma,
            start: warm.clone(),
            ..opts.clone()
        };
        let res = fit_lasso(sample, k, &local);
        let best = match &res {
            Ok(r) => Some(r.clone()),
            Err(Error::NotConverged { best, .. }) => match best.as_ref() {
                BestIterate::Lasso(r) => Some(r.clone()),
                _ => None,
            },
            Err(_) => None,
        };
        warm = match best {
            Some(r) if !has_zero_column(r.params.loadings.as_matrix()) => Some(r.reparam()),
            _ => opts.start.clone(),
        };
        out.push(res);
    }
    Ok(out)
}
