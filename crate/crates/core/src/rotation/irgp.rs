use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::criteria::{lp_smoothed_value, lp_value, lp_weights, surrogate_value};
use super::oblique::{projected_search, random_oblique, rotate_loadings, rotation_gradient, tangent_projection};
use super::{check_loadings, ObliqueRotationMatrix, RotationResult};
use crate::error::{BestIterate, Error, Result};
use crate::model::{FactorCovariance, LoadingMatrix};
use crate::optim::LineSearch;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrgpOptions {
    pub epsilon: f64,
    /// Tolerance on the max-norm of the projected gradient of `Q_{p,ε}`.
    pub tol: f64,
    /// Relative tolerance on the change of `Q_{p,ε}` between iterations.
    pub objective_tol: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub line_search: LineSearch,
    /// Starting rotation. `None` means the identity for p = 1 and the p = 1
    /// solution (plus random starts) for p < 1.
    pub start: Option<ObliqueRotationMatrix>,
    /// Decreasing ε values solved in turn with warm starts; the last entry
    /// replaces `epsilon`.
    pub anneal: Option<Vec<f64>>,
    /// Without an explicit schedule, solve at ε = 0.1, 0.01, ... before
    /// `epsilon`. Starting at a tiny ε pins near-zero loadings under huge
    /// weights and the iterates crawl.
    pub continuation: bool,
    /// Extra seeded random starts used when p < 1 and no start is given.
    pub random_starts: usize,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for IrgpOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tol: 1e-6,
            objective_tol: 1e-9,
            max_iter: 10_000,
            line_search: LineSearch::rotation(),
            start: None,
            anneal: None,
            continuation: true,
            random_starts: 10,
            seed: 0,
            record_trace: false,
        }
    }
}

impl IrgpOptions {
    /// The ε values actually solved, ending at the target ε.
    pub fn schedule(&self) -> Vec<f64> {
        if let Some(s) = &self.anneal {
            return s.clone();
        }
        let mut out = Vec::new();
        if self.continuation {
            let mut e = 0.1;
            while e > self.epsilon * (1.0 + 1e-9) {
                out.push(e);
                e /= 10.0;
            }
        }
        out.push(self.epsilon);
        out
    }

    fn validate(&self) -> Result<()> {
        let eps_ok = self.epsilon > 0.0
            && self
                .anneal
                .as_ref()
                .is_none_or(|s| !s.is_empty() && s.iter().all(|&e| e > 0.0));
        if !eps_ok {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// L^p rotation of `A` by iteratively reweighted gradient projection.
///
/// Each iteration rebuilds the weights at the current rotation and takes one
/// Armijo-backtracked projected gradient step on the weighted surrogate
/// `Σ w_jk λ_jk²`. Because the surrogate majorises `Q_{p,ε}` up to an affine
/// change, the smoothed objective never increases.
pub fn rotate_irgp(a: &LoadingMatrix, p: f64, opts: &IrgpOptions) -> Result<RotationResult> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("p must lie in (0, 1], got {p}")));
    }
    opts.validate()?;
    check_loadings(a)?;
    let k = a.n_factors();

    if let Some(start) = &opts.start {
        if start.as_matrix().nrows() != k {
            return Err(Error::DimensionMismatch("start rotation has wrong size".into()));
        }
        return solve_annealed(a, p, start.as_matrix().clone(), opts);
    }
    if p == 1.0 {
        return solve_annealed(a, p, DMatrix::identity(k, k), opts);
    }

    let mut candidates: Vec<Result<RotationResult>> = Vec::new();
    let warm = match solve_annealed(a, 1.0, DMatrix::identity(k, k), opts) {
        Ok(r) => Ok(r),
        Err(e) => match e.into_best() {
            Some(BestIterate::Rotation(r)) => Ok(r),
            _ => Err(Error::InvalidInput("p = 1 warm start failed".into())),
        },
    };
    if let Ok(w) = &warm {
        candidates.push(solve_annealed(a, p, w.rotation.as_matrix().clone(), opts));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_starts {
        let t0 = random_oblique(k, &mut rng).into_inner();
        candidates.push(solve_annealed(a, p, t0, opts));
    }
    pick_best(candidates)
}

/// Chooses the converged candidate with the smallest objective, falling back
/// to the best non-converged iterate.
fn pick_best(candidates: Vec<Result<RotationResult>>) -> Result<RotationResult> {
    let mut best_ok: Option<RotationResult> = None;
    let mut best_err: Option<Error> = None;
    let mut best_err_obj = f64::INFINITY;
    for c in candidates {
        match c {
            Ok(r) => {
                if best_ok.as_ref().is_none_or(|b| r.objective < b.objective) {
                    best_ok = Some(r);
                }
            }
            Err(e) => {
                let obj = match &e {
                    Error::NotConverged { best, .. } => match best.as_ref() {
                        BestIterate::Rotation(r) => r.objective,
                        _ => f64::INFINITY,
                    },
                    _ => f64::INFINITY,
                };
                if best_err.is_none() || obj < best_err_obj {
                    best_err_obj = obj;
                    best_err = Some(e);
                }
            }
        }
    }
    match (best_ok, best_err) {
        (Some(r), _) => Ok(r),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::InvalidInput("no rotation starts were run".into())),
    }
}

fn solve_annealed(a: &LoadingMatrix, p: f64, t0: DMatrix<f64>, opts: &IrgpOptions) -> Result<RotationResult> {
    let schedule = opts.schedule();
    let mut t = t0;
    let mut iterations = 0;
    let mut trace = opts.record_trace.then(Vec::new);
    let last = schedule.len() - 1;
    for (stage, &eps) in schedule.iter().enumerate() {
        let out = solve_single(a, p, eps, t, opts, iterations, trace.as_mut());
        match out {
            Ok(mut r) => {
                iterations = r.iterations;
                if stage == last {
                    r.trace = trace;
                    return Ok(r);
                }
                t = r.rotation.into_inner();
            }
            Err(Error::NotConverged { max_iter, best }) => {
                // intermediate stages only need to be good warm starts
                let BestIterate::Rotation(mut r) = *best else {
                    unreachable!("rotation solver returns rotation iterates");
                };
                iterations = r.iterations;
                if stage == last {
                    r.trace = trace;
                    return Err(Error::NotConverged {
                        max_iter,
                        best: Box::new(BestIterate::Rotation(r)),
                    });
                }
                t = r.rotation.into_inner();
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("schedule is non-empty")
}

fn solve_single(
    a: &LoadingMatrix,
    p: f64,
    eps: f64,
    t0: DMatrix<f64>,
    opts: &IrgpOptions,
    iter_offset: usize,
    mut trace: Option<&mut Vec<(usize, f64)>>,
) -> Result<RotationResult> {
    let am = a.as_matrix();
    let mut t = super::oblique::normalize_columns(&t0)?;
    let mut lambda =
        rotate_loadings(am, &t).ok_or_else(|| Error::RankDeficient("starting rotation is singular".into()))?;
    let mut q = lp_smoothed_value(&lambda, p, eps);
    if let Some(tr) = trace.as_deref_mut() {
        tr.push((iter_offset, q));
    }
    let mut q_change = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let w = lp_weights(&lambda, p, eps);
        let gq = lambda.component_mul(&w) * 2.0;
        let grad = rotation_gradient(&lambda, &gq, &t)
            .ok_or_else(|| Error::RankDeficient("rotation became singular".into()))?;
        let tangent = tangent_projection(&t, &grad);
        // ∇Q_{p,ε} = (p/2) ∇G_t at the current rotation
        let pg_norm = 0.5 * p * tangent.amax();
        let converged = pg_norm < opts.tol && q_change < opts.objective_tol * (1.0 + q.abs());
        let stalled = iterations > 0 && q_change == 0.0 && pg_norm < opts.tol * 1e2;
        if converged || stalled || iterations >= opts.max_iter {
            let result = build_result(t, lambda, q, p, iter_offset + iterations, converged || stalled, pg_norm);
            return if result.converged {
                Ok(result)
            } else {
                Err(Error::NotConverged {
                    max_iter: opts.max_iter,
                    best: Box::new(BestIterate::Rotation(result)),
                })
            };
        }
        iterations += 1;

        let g0 = surrogate_value(&lambda, &w);
        let step = projected_search(am, &t, &grad, tangent.norm_squared(), g0, &opts.line_search, |l| {
            surrogate_value(l, &w)
        });
        let Some(step) = step else {
            // no admissible step: the current point is stationary to
            // working precision
            let result = build_result(
                t,
                lambda,
                q,
                p,
                iter_offset + iterations,
                pg_norm < opts.tol * 1e2,
                pg_norm,
            );
            return if result.converged {
                Ok(result)
            } else {
                Err(Error::NotConverged {
                    max_iter: opts.max_iter,
                    best: Box::new(BestIterate::Rotation(result)),
                })
            };
        };
        let q_new = lp_smoothed_value(&step.lambda, p, eps);
        q_change = (q - q_new).abs();
        t = step.t;
        lambda = step.lambda;
        q = q_new;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((iter_offset + iterations, q));
        }
    }
}

fn build_result(
    t: DMatrix<f64>,
    lambda: DMatrix<f64>,
    q: f64,
    p: f64,
    iterations: usize,
    converged: bool,
    pg_norm: f64,
) -> RotationResult {
    let lp = lp_value(&lambda, p);
    RotationResult {
        rotated_loadings: LoadingMatrix::new(lambda).expect("finite rotated loadings"),
        factor_cov: FactorCovariance::from_rotation(&t),
        rotation: ObliqueRotationMatrix::from_normalized(t),
        objective: q,
        lp_objective: Some(lp),
        iterations,
        converged,
        projected_gradient_norm: pg_norm,
        trace: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::align_matrix;
    use crate::rotation::{rotate_gp_smooth, GpOptions, RotationCriterion};

    fn simple_6x2() -> DMatrix<f64> {
        DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    }

    // A = Λ T' with T = Q U, Q a random orthogonal matrix and U'U = Φ a
    // two-factor correlation of moderate size, so that Λ = A T'^{-1}
    fn planted(lambda: &DMatrix<f64>, seed: u64) -> LoadingMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi: f64 = rng.random_range(-0.5..0.5);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let q = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, phi, 0.0, (1.0 - phi * phi).sqrt()]);
        let t = q * u;
        LoadingMatrix::new(lambda * t.transpose()).unwrap()
    }

    #[test]
    fn default_schedule_descends_by_decades_to_epsilon() {
        let s = IrgpOptions::default().schedule();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], 0.1);
        assert_eq!(*s.last().unwrap(), 1e-4);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let plain = IrgpOptions {
            continuation: false,
            ..IrgpOptions::default()
        };
        assert_eq!(plain.schedule(), vec![1e-4]);
        let big = IrgpOptions {
            epsilon: 0.5,
            ..IrgpOptions::default()
        };
        assert_eq!(big.schedule(), vec![0.5]);
    }

    #[test]
    fn perfect_simple_structure_is_a_fixed_point() {
        let l = simple_6x2();
        for p in [0.5, 1.0] {
            let res = rotate_irgp(&LoadingMatrix::new(l.clone()).unwrap(), p, &IrgpOptions::default()).unwrap();
            let d = align_matrix(res.rotated_loadings.as_matrix(), &l)
                .unwrap()
                .aligned_distance;
            assert!(d < 1e-6, "p={p}: distance {d}");
        }
    }

    #[test]
    fn planted_simple_structure_is_recovered() {
        // with correlated factors the minimiser of Q_{p,ε} sits about
        // εφ/sqrt(1-φ²) away from the exact zeros when p = 1 (about φ ε^1.5
        // when p = 0.5), so ε is annealed below its default before comparing
        let schedule = |p: f64| {
            let last = if p == 1.0 { 7 } else { 4 };
            (2..=last).map(|e| 10f64.powi(-e)).collect::<Vec<_>>()
        };
        let l = simple_6x2();
        for (seed, p) in [(1, 1.0), (2, 0.5), (3, 1.0), (4, 0.5)] {
            let opts = IrgpOptions {
                anneal: Some(schedule(p)),
                ..IrgpOptions::default()
            };
            let res = rotate_irgp(&planted(&l, seed), p, &opts).unwrap();
            let d = align_matrix(res.rotated_loadings.as_matrix(), &l)
                .unwrap()
                .aligned_distance;
            assert!(d < 1e-6, "seed {seed}, p={p}: distance {d}");
        }
    }

    #[test]
    fn reconstruction_and_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let a = DMatrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let res = rotate_irgp(&LoadingMatrix::new(a.clone()).unwrap(), 1.0, &IrgpOptions::default()).unwrap();
        let l = res.rotated_loadings.as_matrix();
        let phi = res.factor_cov.as_matrix();
        assert!((l * phi * l.transpose() - &a * a.transpose()).norm() < 1e-8);
        assert!((l * res.rotation.as_matrix().transpose() - &a).norm() < 1e-8);
        for k in 0..3 {
            assert!((phi[(k, k)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_objective_trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        let a = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        for p in [0.5, 1.0] {
            let opts = IrgpOptions {
                record_trace: true,
                start: Some(ObliqueRotationMatrix::identity(3)),
                ..IrgpOptions::default()
            };
            let res = match rotate_irgp(&LoadingMatrix::new(a.clone()).unwrap(), p, &opts) {
                Ok(r) => r,
                Err(e) => match e.into_best() {
                    Some(BestIterate::Rotation(r)) => r,
                    _ => panic!("rotation failed"),
                },
            };
            let tr = res.trace.unwrap();
            assert!(tr.len() > 2);
            for w in tr.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-12 * (1.0 + w[0].1.abs()), "p={p}: {:?}", w);
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
            let t = random_oblique(3, &mut rng).into_inner();
            let l = rotate_loadings(&a, &t).unwrap();
            let w = lp_weights(&l, 0.5, 0.1);
            let gq = l.component_mul(&w) * 2.0;
            let g = rotation_gradient(&l, &gq, &t).unwrap();
            let f = |t: &DMatrix<f64>| surrogate_value(&rotate_loadings(&a, t).unwrap(), &w);
            for idx in 0..9 {
                let h = 1e-6;
                let mut up = t.clone();
                let mut dn = t.clone();
                up[idx] += h;
                dn[idx] -= h;
                let num = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((g[idx] - num).abs() <= 1e-5 * num.abs().max(1.0));
            }
        }
    }

    #[test]
    fn agrees_with_gradient_projection_on_the_smoothed_criterion() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = LoadingMatrix::new(DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let irgp = rotate_irgp(&a, 1.0, &IrgpOptions::default()).unwrap();
        let gp = rotate_gp_smooth(
            &a,
            &RotationCriterion::LpSmoothed { p: 1.0, epsilon: 1e-4 },
            &GpOptions::default(),
        )
        .unwrap();
        assert!((irgp.objective - gp.objective).abs() < 1e-5);
    }

    #[test]
    fn equivariant_under_column_permutation_and_sign_flip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = DMatrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut b = a.clone();
        b.swap_columns(0, 2);
        b.column_mut(1).neg_mut();
        for p in [1.0, 0.5] {
            let ra = rotate_irgp(&LoadingMatrix::new(a.clone()).unwrap(), p, &IrgpOptions::default()).unwrap();
            let rb = rotate_irgp(&LoadingMatrix::new(b.clone()).unwrap(), p, &IrgpOptions::default()).unwrap();
            let d = align_matrix(rb.rotated_loadings.as_matrix(), ra.rotated_loadings.as_matrix())
                .unwrap()
                .aligned_distance;
            assert!(d < 1e-6, "p={p}: distance {d}");
        }
    }

    #[test]
    fn seven_by_two_counterexample_separates_p_half_from_p_one() {
        let star = DMatrix::from_row_slice(
            7,
            2,
            &[
                1.20, 0.0, 0.0, 0.27, 0.15, 0.0, 0.0, 1.04, 0.25, 0.15, 1.05, 1.29, 0.18, 0.11,
            ],
        );
        let a = LoadingMatrix::new(star.clone()).unwrap();
        let half = rotate_irgp(&a, 0.5, &IrgpOptions::default()).unwrap();
        let d_half = align_matrix(half.rotated_loadings.as_matrix(), &star)
            .unwrap()
            .aligned_distance;
        assert!(d_half < 1e-3, "p=0.5 distance {d_half}");
        let one = rotate_irgp(&a, 1.0, &IrgpOptions::default()).unwrap();
        let d_one = align_matrix(one.rotated_loadings.as_matrix(), &star)
            .unwrap()
            .aligned_distance;
        assert!(d_one > 1e-2, "p=1 distance {d_one}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = LoadingMatrix::new(simple_6x2()).unwrap();
        assert!(rotate_irgp(&a, 0.0, &IrgpOptions::default()).is_err());
        assert!(rotate_irgp(&a, 1.5, &IrgpOptions::default()).is_err());
        let opts = IrgpOptions {
            epsilon: 0.0,
            ..IrgpOptions::default()
        };
        assert!(rotate_irgp(&a, 1.0, &opts).is_err());
        let rank1 = LoadingMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        assert!(matches!(
            rotate_irgp(&rank1, 1.0, &IrgpOptions::default()),
            Err(Error::RankDeficient(_))
        ));
    }
}
