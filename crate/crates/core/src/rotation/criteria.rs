use nalgebra::DMatrix;

use super::RotationCriterion;
use crate::model::LoadingMatrix;

/// L^p component loss `Σ_jk |λ_jk|^p`.
pub fn clf_value(loadings: &LoadingMatrix, p: f64) -> f64 {
    lp_value(loadings.as_matrix(), p)
}

/// Smoothed L^p loss `Σ_jk (ε² + λ_jk²)^{p/2}`.
pub fn clf_smoothed_value(loadings: &LoadingMatrix, p: f64, epsilon: f64) -> f64 {
    lp_smoothed_value(loadings.as_matrix(), p, epsilon)
}

pub(crate) fn lp_value(lambda: &DMatrix<f64>, p: f64) -> f64 {
    lambda.iter().map(|x| x.abs().powf(p)).sum()
}

pub(crate) fn lp_smoothed_value(lambda: &DMatrix<f64>, p: f64, epsilon: f64) -> f64 {
    let e2 = epsilon * epsilon;
    lambda.iter().map(|x| (e2 + x * x).powf(0.5 * p)).sum()
}

/// IRLS weights `w_jk = (λ_jk² + ε²)^{p/2 - 1}` of the quadratic surrogate.
pub fn lp_weights(lambda: &DMatrix<f64>, p: f64, epsilon: f64) -> DMatrix<f64> {
    let e2 = epsilon * epsilon;
    lambda.map(|x| (x * x + e2).powf(0.5 * p - 1.0))
}

/// Weighted sum of squares `Σ w_jk λ_jk²`.
pub(crate) fn surrogate_value(lambda: &DMatrix<f64>, weights: &DMatrix<f64>) -> f64 {
    lambda.iter().zip(weights.iter()).map(|(x, w)| w * x * x).sum()
}

/// Criterion value and its gradient with respect to the loadings.
///
/// For the unsmoothed `Lp` criterion the gradient is the subgradient that
/// takes the value zero at exact zeros.
pub fn criterion_value_and_gradient(criterion: &RotationCriterion, lambda: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    match *criterion {
        RotationCriterion::Lp { p } => {
            let g = lambda.map(|x| {
                if x == 0.0 {
                    0.0
                } else {
                    p * x.signum() * x.abs().powf(p - 1.0)
                }
            });
            (lp_value(lambda, p), g)
        }
        RotationCriterion::LpSmoothed { p, epsilon } => {
            let w = lp_weights(lambda, p, epsilon);
            let g = lambda.component_mul(&w) * p;
            (lp_smoothed_value(lambda, p, epsilon), g)
        }
        RotationCriterion::Quartimin => {
            let sq = lambda.map(|x| x * x);
            let row_sums: Vec<f64> = sq.row_iter().map(|r| r.sum()).collect();
            let mut f = 0.0;
            let g = DMatrix::from_fn(lambda.nrows(), lambda.ncols(), |j, k| {
                let others = row_sums[j] - sq[(j, k)];
                f += sq[(j, k)] * others;
                lambda[(j, k)] * others
            });
            (f / 4.0, g)
        }
        RotationCriterion::Geomin { geomin_eps } => {
            let k = lambda.ncols() as f64;
            let mut f = 0.0;
            let mut g = DMatrix::zeros(lambda.nrows(), lambda.ncols());
            for (j, row) in lambda.row_iter().enumerate() {
                let mean_log = row.iter().map(|x| (x * x + geomin_eps).ln()).sum::<f64>() / k;
                let pro = mean_log.exp();
                f += pro;
                for (c, x) in row.iter().enumerate() {
                    g[(j, c)] = 2.0 / k * x / (x * x + geomin_eps) * pro;
                }
            }
            (f, g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(rows: usize, cols: usize, data: &[f64]) -> LoadingMatrix {
        LoadingMatrix::from_row_slice(rows, cols, data).unwrap()
    }

    #[test]
    fn l1_is_absolute_sum() {
        assert_eq!(clf_value(&lm(2, 2, &[1.0, -2.0, 0.0, 3.0]), 1.0), 6.0);
    }

    #[test]
    fn half_power_is_root_sum() {
        assert_relative_eq!(clf_value(&lm(2, 2, &[4.0, 0.0, 0.0, 9.0]), 0.5), 5.0);
    }

    #[test]
    fn zero_matrix_has_zero_loss() {
        for p in [0.1, 0.5, 1.0] {
            assert_eq!(clf_value(&lm(2, 2, &[0.0; 4]), p), 0.0);
        }
    }

    #[test]
    fn smoothed_single_entry_cases() {
        assert_relative_eq!(clf_smoothed_value(&lm(1, 1, &[0.0]), 1.0, 0.01), 0.01);
        assert_relative_eq!(clf_smoothed_value(&lm(1, 1, &[3.0]), 1.0, 4.0), 5.0);
    }

    #[test]
    fn smoothed_converges_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = LoadingMatrix::new(DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        for p in [0.5, 1.0] {
            let exact = clf_value(&l, p);
            let mut prev = f64::INFINITY;
            for eps in [1e-2, 1e-4, 1e-6] {
                let v = clf_smoothed_value(&l, p, eps);
                assert!(v >= exact);
                assert!(v - exact <= 18.0 * eps.powf(p) + 1e-15);
                assert!(v - exact < prev);
                prev = v - exact;
            }
        }
    }

    #[test]
    fn smooth_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let criteria = [
            RotationCriterion::Quartimin,
            RotationCriterion::Geomin { geomin_eps: 0.01 },
            RotationCriterion::LpSmoothed { p: 0.5, epsilon: 0.05 },
            RotationCriterion::LpSmoothed { p: 1.0, epsilon: 1e-2 },
        ];
        for _ in 0..25 {
            let l = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
            for c in &criteria {
                let (_, g) = criterion_value_and_gradient(c, &l);
                for idx in 0..l.len() {
                    let h = 1e-6;
                    let mut up = l.clone();
                    let mut dn = l.clone();
                    up[idx] += h;
                    dn[idx] -= h;
                    let num =
                        (criterion_value_and_gradient(c, &up).0 - criterion_value_and_gradient(c, &dn).0) / (2.0 * h);
                    let scale = g[idx].abs().max(num.abs()).max(1e-3);
                    assert!((g[idx] - num).abs() / scale < 1e-5, "{c:?}: {} vs {num}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn lp_component_is_concave_on_nonnegatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(0.05..=1.0);
            let x: f64 = rng.random_range(0.0..5.0);
            let y: f64 = rng.random_range(0.0..5.0);
            let h = |t: f64| t.powf(p);
            assert!(h(0.5 * (x + y)) >= 0.5 * (h(x) + h(y)) - 1e-12);
            if x < y {
                assert!(h(x) <= h(y));
            }
        }
    }
}
