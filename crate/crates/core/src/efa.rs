//! First-step unrotated ML estimator θ̂ = (Â, I, Ω̂).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{BestIterate, Error, Result};
use crate::linalg;
use crate::model::{discrepancy_eval, implied_cov_raw, LoadingMatrix, SampleCovariance, Uniqueness};
use crate::optim::{minimize_box, BoxBfgsOptions, LineSearch};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Tolerance on the max-norm of the projected gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialEstimate {
    /// Unrotated loadings Â; only `Â Â'` is identified.
    pub loadings_a: LoadingMatrix,
    pub uniqueness: Uniqueness,
    pub discrepancy_value: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

/// Lower bound on `v = log ω` used to keep Σ(θ) away from singularity.
pub fn heywood_floor(sample: &SampleCovariance) -> f64 {
    let max_diag = sample.as_matrix().diagonal().max();
    (1e-4 * max_diag).ln()
}

fn positive_eigen_count(sample: &SampleCovariance) -> usize {
    let vals = linalg::sym_eigenvalues(sample.as_matrix());
    let top = vals.last().copied().unwrap_or(0.0);
    vals.iter().filter(|&&v| v > 1e-10 * top.max(1e-300)).count()
}

/// Principal-factor start: leading eigenvectors of S scaled by the square
/// roots of their eigenvalues, uniquenesses from the positive part of
/// `diag(S - A0 A0')` floored at `0.05 diag(S)`.
pub fn principal_factor_start(sample: &SampleCovariance, k: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let s = sample.as_matrix();
    let j = s.nrows();
    if k == 0 || k > j {
        return Err(Error::InvalidInput(format!(
            "number of factors must satisfy 1 <= K <= J, got K={k}, J={j}"
        )));
    }
    if positive_eigen_count(sample) < k {
        return Err(Error::RankDeficient(format!(
            "sample covariance has fewer than {k} positive eigenvalues"
        )));
    }
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut a0 = DMatrix::zeros(j, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        let mut col = eig.eigenvectors.column(idx).into_owned() * scale;
        // deterministic orientation: largest-magnitude entry positive
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        a0.set_column(c, &col);
    }
    let floor = heywood_floor(sample);
    let v0 = DVector::from_fn(j, |r, _| {
        let resid = s[(r, r)] - a0.row(r).norm_squared();
        resid.max(0.05 * s[(r, r)]).ln().max(floor)
    });
    Ok((a0, v0))
}

fn pack(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + v.len(), a.iter().chain(v.iter()).copied())
}

fn unpack(x: &DVector<f64>, j: usize, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_column_slice(j, k, &x.as_slice()[..j * k]);
    let v = DVector::from_column_slice(&x.as_slice()[j * k..]);
    (a, v)
}

/// Fits the orthogonal-factor ML model from the principal-factor start.
pub fn fit_efa(sample: &SampleCovariance, k: usize, opts: &OptimOptions) -> Result<InitialEstimate> {
    let (a0, v0) = principal_factor_start(sample, k)?;
    fit_efa_from(sample, a0, v0, opts)
}

/// Fits the orthogonal-factor ML model from a given `(A, log ω)` start.
pub fn fit_efa_from(
    sample: &SampleCovariance,
    a0: DMatrix<f64>,
    v0: DVector<f64>,
    opts: &OptimOptions,
) -> Result<InitialEstimate> {
    let j = sample.dim();
    let k = a0.ncols();
    if a0.nrows() != j || v0.len() != j {
        return Err(Error::DimensionMismatch(
            "starting values do not match the sample covariance".into(),
        ));
    }
    if positive_eigen_count(sample) < k {
        return Err(Error::RankDeficient(format!(
            "sample covariance has fewer than {k} positive eigenvalues"
        )));
    }
    let s = sample.as_matrix();
    let identity = DMatrix::identity(k, k);
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (a, v) = unpack(x, j, k);
        let omega = v.map(f64::exp);
        let sigma = implied_cov_raw(&a, &identity, &omega);
        let eval = discrepancy_eval(&sigma, s)?;
        let ga = &eval.m * &a * 2.0;
        let gv = DVector::from_fn(j, |r, _| eval.m[(r, r)] * omega[r]);
        Ok((eval.value, pack(&ga, &gv)))
    };
    let n = j * k + j;
    let floor = heywood_floor(sample);
    let lower = DVector::from_fn(n, |i, _| if i < j * k { f64::NEG_INFINITY } else { floor });
    let upper = DVector::from_element(n, f64::INFINITY);
    let bfgs = BoxBfgsOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        line_search: LineSearch::default(),
    };
    let out = minimize_box(objective, pack(&a0, &v0), &lower, &upper, &bfgs)?;
    let (a, v) = unpack(&out.x, j, k);
    let estimate = InitialEstimate {
        loadings_a: LoadingMatrix::new(a)?,
        uniqueness: Uniqueness::from_log(&v)?,
        discrepancy_value: out.value,
        converged: out.converged,
        n_iterations: out.iterations,
    };
    if out.converged {
        Ok(estimate)
    } else {
        Err(Error::NotConverged {
            max_iter: opts.max_iter,
            best: Box::new(BestIterate::Initial(estimate)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ml_discrepancy, FactorCovariance, FactorModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_sample(lambda: &DMatrix<f64>, omega: &DVector<f64>) -> SampleCovariance {
        let k = lambda.ncols();
        SampleCovariance::new(implied_cov_raw(lambda, &DMatrix::identity(k, k), omega), 500).unwrap()
    }

    fn ident_discrepancy(est: &InitialEstimate, sample: &SampleCovariance) -> f64 {
        let k = est.loadings_a.n_factors();
        let p = FactorModelParams::new(
            est.loadings_a.clone(),
            FactorCovariance::identity(k),
            est.uniqueness.clone(),
        )
        .unwrap();
        ml_discrepancy(&p, sample).unwrap()
    }

    #[test]
    fn recovers_exact_six_by_two_model() {
        let lambda = DMatrix::from_row_slice(6, 2, &[0.8, 0.0, 0.7, 0.2, 0.6, 0.0, 0.1, 0.7, 0.0, 0.8, 0.3, 0.6]);
        let omega = DVector::from_fn(6, |r, _| 1.0 - lambda.row(r).norm_squared());
        let sample = exact_sample(&lambda, &omega);
        let est = fit_efa(&sample, 2, &OptimOptions::default()).unwrap();
        let a = est.loadings_a.as_matrix();
        let diff = a * a.transpose() - &lambda * lambda.transpose();
        assert!(diff.norm() < 1e-6, "AA' error {}", diff.norm());
        let omega_err = (est.uniqueness.as_vector() - &omega).amax();
        assert!(omega_err < 1e-6, "omega error {omega_err}");
        assert!((est.discrepancy_value - ident_discrepancy(&est, &sample)).abs() < 1e-10);
    }

    #[test]
    fn identity_sample_is_fit_exactly() {
        // with S = I every eigenvector is a principal axis and the default
        // start already reproduces S, so only the fitted Σ is determined
        let sample = SampleCovariance::new(DMatrix::identity(3, 3), 100).unwrap();
        let est = fit_efa(&sample, 1, &OptimOptions::default()).unwrap();
        let a = est.loadings_a.as_matrix();
        let sigma = implied_cov_raw(a, &DMatrix::identity(1, 1), est.uniqueness.as_vector());
        assert!((sigma - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn identity_sample_from_diffuse_start_has_no_common_variance() {
        let sample = SampleCovariance::new(DMatrix::identity(3, 3), 100).unwrap();
        let a0 = DMatrix::from_element(3, 1, 0.1);
        let est = fit_efa_from(&sample, a0, DVector::zeros(3), &OptimOptions::default()).unwrap();
        // the discrepancy is quartic in A near zero, so A converges only to
        // the cube root of the gradient tolerance; AA' is much tighter
        let a = est.loadings_a.as_matrix();
        assert!((a * a.transpose()).amax() < 1e-3);
        let err = (est.uniqueness.as_vector() - DVector::from_element(3, 1.0)).amax();
        assert!(err < 1e-3);
    }

    #[test]
    fn recovery_on_fixture_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..10 {
            let k = 1 + case % 3;
            let j = 4 * k + case % 3;
            let lambda = DMatrix::from_fn(j, k, |r, c| {
                if r % k == c {
                    rng.random_range(0.5..0.9)
                } else {
                    rng.random_range(-0.25..0.25)
                }
            });
            let omega = DVector::from_fn(j, |_, _| rng.random_range(0.2..0.6));
            let sample = exact_sample(&lambda, &omega);
            let est = fit_efa(&sample, k, &OptimOptions::default()).unwrap();
            let a = est.loadings_a.as_matrix();
            let diff = (a * a.transpose() - &lambda * lambda.transpose()).norm();
            assert!(diff < 1e-5, "case {case}: AA' error {diff}");
        }
    }

    #[test]
    fn fit_improves_on_start_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(80, 6, |_, _| rng.random_range(-1.0..1.0));
        let sample = SampleCovariance::from_data(&x, false).unwrap();
        let (a0, v0) = principal_factor_start(&sample, 2).unwrap();
        let start = FactorModelParams::new(
            LoadingMatrix::new(a0).unwrap(),
            FactorCovariance::identity(2),
            Uniqueness::from_log(&v0).unwrap(),
        )
        .unwrap();
        let f0 = ml_discrepancy(&start, &sample).unwrap();
        let first = match fit_efa(&sample, 2, &OptimOptions::default()) {
            Ok(e) => e,
            Err(e) => match e.into_best() {
                Some(BestIterate::Initial(e)) => e,
                _ => panic!("unexpected error"),
            },
        };
        assert!(first.discrepancy_value <= f0);
        let second = fit_efa(&sample, 2, &OptimOptions::default()).map_err(|_| ()).ok();
        if let Some(second) = second {
            assert_eq!(first.loadings_a, second.loadings_a);
        }
    }

    #[test]
    fn rank_deficient_sample_is_rejected() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = &v * v.transpose();
        let sample = SampleCovariance::new(s, 10).unwrap();
        assert!(matches!(
            fit_efa(&sample, 2, &OptimOptions::default()),
            Err(Error::RankDeficient(_))
        ));
    }
}
