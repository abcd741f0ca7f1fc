use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::criteria::{criterion_value_and_gradient, lp_value};
use super::oblique::{normalize_columns, projected_search, rotate_loadings, rotation_gradient, tangent_projection};
use super::{check_loadings, ObliqueRotationMatrix, RotationCriterion, RotationResult};
use crate::error::{BestIterate, Error, Result};
use crate::model::{FactorCovariance, LoadingMatrix};
use crate::optim::LineSearch;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpOptions {
    pub tol: f64,
    pub objective_tol: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub line_search: LineSearch,
    pub start: Option<ObliqueRotationMatrix>,
    pub record_trace: bool,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            objective_tol: 1e-9,
            max_iter: 10_000,
            line_search: LineSearch::rotation(),
            start: None,
            record_trace: false,
        }
    }
}

/// Gradient projection over the oblique manifold for a smooth criterion.
pub fn rotate_gp_smooth(a: &LoadingMatrix, criterion: &RotationCriterion, opts: &GpOptions) -> Result<RotationResult> {
    criterion.validate()?;
    if !criterion.is_smooth() {
        return Err(Error::InvalidInput(
            "gradient projection needs a smooth criterion; use the IRGP solver for L^p".into(),
        ));
    }
    check_loadings(a)?;
    let am = a.as_matrix();
    let k = a.n_factors();
    let t0 = match &opts.start {
        Some(s) if s.as_matrix().nrows() != k => {
            return Err(Error::DimensionMismatch("start rotation has wrong size".into()))
        }
        Some(s) => s.as_matrix().clone(),
        None => DMatrix::identity(k, k),
    };
    let mut t = normalize_columns(&t0)?;
    let mut lambda =
        rotate_loadings(am, &t).ok_or_else(|| Error::RankDeficient("starting rotation is singular".into()))?;
    let (mut f, mut gq) = criterion_value_and_gradient(criterion, &lambda);
    let mut trace = opts.record_trace.then(|| vec![(0, f)]);
    let mut f_change = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let grad = rotation_gradient(&lambda, &gq, &t)
            .ok_or_else(|| Error::RankDeficient("rotation became singular".into()))?;
        let tangent = tangent_projection(&t, &grad);
        let pg_norm = tangent.amax();
        let converged = pg_norm < opts.tol && f_change < opts.objective_tol * (1.0 + f.abs());
        let step = if converged || iterations >= opts.max_iter {
            None
        } else {
            iterations += 1;
            projected_search(am, &t, &grad, tangent.norm_squared(), f, &opts.line_search, |l| {
                criterion_value_and_gradient(criterion, l).0
            })
        };
        let Some(step) = step else {
            let ok = converged || pg_norm < opts.tol * 1e2;
            let lp = match criterion {
                RotationCriterion::LpSmoothed { p, .. } => Some(lp_value(&lambda, *p)),
                _ => None,
            };
            let result = RotationResult {
                rotated_loadings: LoadingMatrix::new(lambda).expect("finite rotated loadings"),
                factor_cov: FactorCovariance::from_rotation(&t),
                rotation: ObliqueRotationMatrix::from_normalized(t),
                objective: f,
                lp_objective: lp,
                iterations,
                converged: ok,
                projected_gradient_norm: pg_norm,
                trace,
            };
            return if ok {
                Ok(result)
            } else {
                Err(Error::NotConverged {
                    max_iter: opts.max_iter,
                    best: Box::new(BestIterate::Rotation(result)),
                })
            };
        };
        let (f_new, gq_new) = criterion_value_and_gradient(criterion, &step.lambda);
        f_change = (f - f_new).abs();
        t = step.t;
        lambda = step.lambda;
        f = f_new;
        gq = gq_new;
        if let Some(tr) = trace.as_mut() {
            tr.push((iterations, f));
        }
    }
}
