//! Alignment of loading matrices up to column permutation and sign flips,
//! and the evaluation metrics of the simulation studies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cfa::SignPattern;
use crate::error::{Error, Result};
use crate::model::LoadingMatrix;

/// Largest K for which alignment enumerates every permutation.
pub const EXHAUSTIVE_MAX_K: usize = 8;

/// Column `c` of the aligned matrix is `signs[c]` times column
/// `permutation[c]` of the candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
    /// Frobenius distance between the aligned candidate and the target.
    pub aligned_distance: f64,
    /// False when the permutation came from the assignment solver rather
    /// than full enumeration.
    pub exhaustive: bool,
}

impl AlignmentTransform {
    pub fn identity(k: usize) -> Self {
        Self {
            permutation: (0..k).collect(),
            signs: vec![1; k],
            aligned_distance: f64::NAN,
            exhaustive: true,
        }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            self.signs[c] as f64 * m[(r, self.permutation[c])]
        })
    }

    /// The same transform acting on a K×K factor covariance: `D' Φ D`.
    pub fn apply_factor_cov(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(phi.nrows(), phi.ncols(), |a, b| {
            (self.signs[a] * self.signs[b]) as f64 * phi[(self.permutation[a], self.permutation[b])]
        })
    }

    pub fn apply_pattern(&self, p: &SignPattern) -> SignPattern {
        p.transform(&self.permutation, &self.signs)
    }
}

/// Cost of sending candidate column `a` to target column `b` with the
/// better of the two signs, and that sign.
fn pair_costs(c: &DMatrix<f64>, t: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<i8>) {
    let k = c.ncols();
    let mut cost = DMatrix::zeros(k, k);
    let mut sign = DMatrix::from_element(k, k, 1i8);
    for a in 0..k {
        let ca = c.column(a);
        for b in 0..k {
            let tb = t.column(b);
            let dot = ca.dot(&tb);
            cost[(a, b)] = ca.norm_squared() + tb.norm_squared() - 2.0 * dot.abs();
            if dot < 0.0 {
                sign[(a, b)] = -1;
            }
        }
    }
    (cost, sign)
}

/// Next permutation in lexicographic order; false when `p` was the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum-cost assignment (Hungarian algorithm, O(n³)). Returns `col_of`
/// with row `r` assigned to column `col_of[r]`.
pub fn solve_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    // 1-based potentials and matching, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Member of the candidate's permutation/sign-flip class closest to the
/// target in Frobenius norm.
pub fn align(candidate: &LoadingMatrix, target: &LoadingMatrix) -> Result<(LoadingMatrix, AlignmentTransform)> {
    let transform = align_matrix(candidate.as_matrix(), target.as_matrix())?;
    let aligned = LoadingMatrix::new(transform.apply(candidate.as_matrix()))?;
    Ok((aligned, transform))
}

pub fn align_matrix(c: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<AlignmentTransform> {
    if c.shape() != t.shape() {
        return Err(Error::DimensionMismatch(format!(
            "cannot align {}x{} with {}x{}",
            c.nrows(),
            c.ncols(),
            t.nrows(),
            t.ncols()
        )));
    }
    let k = c.ncols();
    let (cost, sign) = pair_costs(c, t);
    // perm[b] = candidate column placed at target column b
    let (perm, exhaustive) = if k <= EXHAUSTIVE_MAX_K {
        let mut p: Vec<usize> = (0..k).collect();
        let mut best = p.clone();
        let mut best_cost = f64::INFINITY;
        loop {
            let total: f64 = p.iter().enumerate().map(|(b, &a)| cost[(a, b)]).sum();
            if total < best_cost {
                best_cost = total;
                best.clone_from(&p);
            }
            if !next_permutation(&mut p) {
                break;
            }
        }
        (best, true)
    } else {
        // rows index target columns here
        let by_target = solve_assignment(&cost.transpose());
        (by_target, false)
    };
    let signs: Vec<i8> = perm.iter().enumerate().map(|(b, &a)| sign[(a, b)]).collect();
    let mut transform = AlignmentTransform {
        permutation: perm,
        signs,
        aligned_distance: 0.0,
        exhaustive,
    };
    transform.aligned_distance = (transform.apply(c) - t).norm();
    Ok(transform)
}

/// `‖Λ̂ - Λ*‖²_F / (JK)`.
pub fn mse(aligned: &LoadingMatrix, target: &LoadingMatrix) -> Result<f64> {
    let (a, t) = (aligned.as_matrix(), target.as_matrix());
    if a.shape() != t.shape() {
        return Err(Error::DimensionMismatch("mse needs equally sized matrices".into()));
    }
    Ok((a - t).norm_squared() / a.len() as f64)
}

/// Entrywise `sign(λ) 1{|λ| > c}`.
pub fn hard_threshold(loadings: &DMatrix<f64>, c: f64) -> SignPattern {
    SignPattern::from_signs(&loadings.map(|x| if x.abs() > c { x } else { 0.0 }))
}

fn check_same_shape(a: &SignPattern, b: &SignPattern) -> Result<()> {
    if a.as_matrix().shape() != b.as_matrix().shape() {
        return Err(Error::DimensionMismatch("patterns differ in shape".into()));
    }
    Ok(())
}

/// True positive and true negative rates of the support of `hat`.
pub fn tpr_tnr(hat: &SignPattern, truth: &SignPattern) -> Result<(f64, f64)> {
    check_same_shape(hat, truth)?;
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&h, &t) in hat.as_matrix().iter().zip(truth.as_matrix().iter()) {
        if t != 0 {
            pos += 1;
            tp += (h != 0) as usize;
        } else {
            neg += 1;
            tn += (h == 0) as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::DegeneratePattern(
            "true pattern needs at least one zero and one nonzero entry".into(),
        ));
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// Share of the true nonzero entries whose estimated sign agrees.
pub fn sign_agreement(hat: &SignPattern, truth: &SignPattern) -> Result<f64> {
    check_same_shape(hat, truth)?;
    let mut pos = 0usize;
    let mut agree = 0usize;
    for (&h, &t) in hat.as_matrix().iter().zip(truth.as_matrix().iter()) {
        if t != 0 {
            pos += 1;
            agree += (h == t) as usize;
        }
    }
    if pos == 0 {
        return Err(Error::DegeneratePattern("true pattern has no nonzero entry".into()));
    }
    Ok(agree as f64 / pos as f64)
}

/// Share of entries whose zero/nonzero status is recovered.
pub fn true_selection_rate(hat: &SignPattern, truth: &SignPattern) -> Result<f64> {
    check_same_shape(hat, truth)?;
    let correct = hat
        .as_matrix()
        .iter()
        .zip(truth.as_matrix().iter())
        .filter(|(&h, &t)| (h != 0) == (t != 0))
        .count();
    Ok(correct as f64 / truth.as_matrix().len() as f64)
}

/// Area under a ROC curve given as `(1 - TNR, TPR)` points, by the
/// trapezoid rule after adding the `(0, 0)` and `(1, 1)` endpoints.
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(curve);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Threshold sweep used for ROC curves: the given grid together with every
/// observed `|λ̂|`, deduplicated and sorted.
pub fn roc_thresholds(grid: &[f64], estimates: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = grid.to_vec();
    out.push(0.0);
    for m in estimates {
        out.extend(m.iter().map(|x| x.abs()));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Replication-averaged ROC points `(1 - mean TNR_c, mean TPR_c)` from
/// hard-thresholding each aligned estimate at every threshold.
pub fn roc_curve(estimates: &[DMatrix<f64>], truth: &SignPattern, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no estimates for the ROC curve".into()));
    }
    let b = estimates.len() as f64;
    thresholds
        .iter()
        .map(|&c| {
            let mut tpr = 0.0;
            let mut tnr = 0.0;
            for m in estimates {
                let (p, n) = tpr_tnr(&hard_threshold(m, c), truth)?;
                tpr += p;
                tnr += n;
            }
            Ok((1.0 - tnr / b, tpr / b))
        })
        .collect()
}

/// Entrywise confidence-interval bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMatrix {
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

impl IntervalMatrix {
    pub fn new(lower: DMatrix<f64>, upper: DMatrix<f64>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::DimensionMismatch("interval bounds differ in shape".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("interval lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(j: usize, k: usize) -> Self {
        Self {
            lower: DMatrix::from_element(j, k, f64::NEG_INFINITY),
            upper: DMatrix::from_element(j, k, f64::INFINITY),
        }
    }

    /// Moves columns with the transform; a sign flip maps `(l, u)` to
    /// `(-u, -l)`.
    pub fn transform(&self, t: &AlignmentTransform) -> Self {
        let (j, k) = self.lower.shape();
        let mut lower = DMatrix::zeros(j, k);
        let mut upper = DMatrix::zeros(j, k);
        for c in 0..k {
            let src = t.permutation[c];
            for r in 0..j {
                let (l, u) = (self.lower[(r, src)], self.upper[(r, src)]);
                if t.signs[c] < 0 {
                    lower[(r, c)] = -u;
                    upper[(r, c)] = -l;
                } else {
                    lower[(r, c)] = l;
                    upper[(r, c)] = u;
                }
            }
        }
        Self { lower, upper }
    }

    pub fn covers(&self, truth: &DMatrix<f64>) -> DMatrix<bool> {
        DMatrix::from_fn(truth.nrows(), truth.ncols(), |r, c| {
            self.lower[(r, c)] < truth[(r, c)] && truth[(r, c)] < self.upper[(r, c)]
        })
    }

    /// Entries whose interval excludes zero.
    pub fn significant(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.lower.nrows(), self.lower.ncols(), |r, c| {
            self.lower[(r, c)] > 0.0 || self.upper[(r, c)] < 0.0
        })
    }
}

/// Entrywise coverage rates over replications. `truths` holds either one
/// matrix per replication or a single matrix shared by all of them.
pub fn ecic(intervals: &[IntervalMatrix], truths: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if intervals.is_empty() {
        return Err(Error::InvalidInput("no replications".into()));
    }
    if truths.len() != 1 && truths.len() != intervals.len() {
        return Err(Error::DimensionMismatch(
            "need one truth per replication or a single shared truth".into(),
        ));
    }
    let (j, k) = intervals[0].lower.shape();
    let mut hits = DMatrix::<f64>::zeros(j, k);
    for (b, iv) in intervals.iter().enumerate() {
        let truth = if truths.len() == 1 { &truths[0] } else { &truths[b] };
        if iv.lower.shape() != (j, k) || truth.shape() != (j, k) {
            return Err(Error::DimensionMismatch("interval matrices differ in shape".into()));
        }
        let cov = iv.covers(truth);
        for (h, &c) in hits.iter_mut().zip(cov.iter()) {
            *h += c as u8 as f64;
        }
    }
    Ok(hits / intervals.len() as f64)
}
