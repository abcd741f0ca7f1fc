//! Confirmatory factor analysis with fixed-zero and sign-constrained
//! loadings: ML fitting, BIC, observed or sandwich information, Wald
//! intervals and a numerical identification check.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::efa::heywood_floor;
use crate::error::{BestIterate, Error, Result};
use crate::linalg;
use crate::model::{
    center_columns, discrepancy_eval, implied_cov_raw, log_likelihood_from_discrepancy, FactorCovariance,
    FactorModelParams, LoadingMatrix, SampleCovariance, Uniqueness,
};
use crate::optim::{minimize_box, BoxBfgsOptions, LineSearch};

/// Loadings below this magnitude on a sign-constrained entry are reported as
/// sitting on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-8;

/// A J×K pattern over {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPattern(DMatrix<i8>);

impl SignPattern {
    pub fn new(entries: DMatrix<i8>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidInput("sign pattern must be non-empty".into()));
        }
        if entries.iter().any(|&v| !(-1..=1).contains(&v)) {
            return Err(Error::InvalidInput("sign pattern entries must be -1, 0 or 1".into()));
        }
        Ok(Self(entries))
    }

    /// Entrywise sign of a loading matrix, with exact zeros kept as 0.
    pub fn from_signs(m: &DMatrix<f64>) -> Self {
        Self(m.map(|x| {
            if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            }
        }))
    }

    pub fn as_matrix(&self) -> &DMatrix<i8> {
        &self.0
    }

    pub fn n_variables(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, j: usize, k: usize) -> i8 {
        self.0[(j, k)]
    }

    pub fn n_nonzero(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    /// Columns with no nonzero entry.
    pub fn vacuous_columns(&self) -> Vec<usize> {
        (0..self.0.ncols())
            .filter(|&c| self.0.column(c).iter().all(|&v| v == 0))
            .collect()
    }

    /// Applies a column permutation and sign flips: column `c` of the result
    /// is `signs[c]` times column `perm[c]` of `self`.
    pub fn transform(&self, perm: &[usize], signs: &[i8]) -> Self {
        Self(DMatrix::from_fn(self.0.nrows(), self.0.ncols(), |r, c| {
            self.0[(r, perm[c])] * signs[c]
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfaSpec {
    pub pattern: SignPattern,
    /// Rows whose loadings are all free and unconstrained in sign.
    pub free_rows: BTreeSet<usize>,
}

impl CfaSpec {
    pub fn new(pattern: SignPattern) -> Self {
        Self {
            pattern,
            free_rows: BTreeSet::new(),
        }
    }

    pub fn with_free_row(pattern: SignPattern, row: usize) -> Self {
        Self {
            pattern,
            free_rows: BTreeSet::from([row]),
        }
    }

    fn is_free(&self, j: usize, k: usize) -> bool {
        self.free_rows.contains(&j) || self.pattern.get(j, k) != 0
    }
}

/// A free parameter of the CFA model, in the order used by the information
/// matrix and standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreeParam {
    Loading {
        row: usize,
        col: usize,
    },
    /// Correlation between factors `k < l`.
    FactorCorr {
        k: usize,
        l: usize,
    },
    /// `v_j = log ω_j`.
    LogUniqueness {
        row: usize,
    },
}

#[derive(Debug, Clone)]
pub struct CfaOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Information-matrix condition number above which the model is
    /// declared not identified.
    pub ident_cutoff: f64,
    pub start: Option<FactorModelParams>,
}

impl Default for CfaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 5000,
            ident_cutoff: 1e8,
            start: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfaFit {
    pub params: FactorModelParams,
    pub spec: CfaSpec,
    pub discrepancy: f64,
    pub loglik: f64,
    pub bic: f64,
    pub n_free_params: usize,
    pub n_obs: usize,
    pub free_params: Vec<FreeParam>,
    /// Standard errors aligned with `free_params`.
    pub std_errors: Option<Vec<f64>>,
    pub identified: bool,
    pub info_condition: f64,
    /// Sign-constrained loadings that ended on the zero boundary.
    pub boundary: Vec<(usize, usize)>,
    pub converged: bool,
    pub iterations: usize,
}

impl CfaFit {
    pub fn estimate(&self, param: &FreeParam) -> f64 {
        let p = &self.params;
        match *param {
            FreeParam::Loading { row, col } => p.loadings.as_matrix()[(row, col)],
            FreeParam::FactorCorr { k, l } => p.factor_cov.as_matrix()[(k, l)],
            FreeParam::LogUniqueness { row } => p.uniqueness.as_vector()[row].ln(),
        }
    }

    /// Standard errors of the loadings as a J×K matrix; entries fixed at zero
    /// hold NaN.
    pub fn loading_std_errors(&self) -> Option<DMatrix<f64>> {
        let se = self.std_errors.as_ref()?;
        let (j, k) = self.params.loadings.as_matrix().shape();
        let mut out = DMatrix::from_element(j, k, f64::NAN);
        for (p, s) in self.free_params.iter().zip(se) {
            if let FreeParam::Loading { row, col } = *p {
                out[(row, col)] = *s;
            }
        }
        Some(out)
    }
}

/// Enumerates the free parameters of a spec.
pub fn free_parameters(spec: &CfaSpec) -> Vec<FreeParam> {
    let (j, k) = spec.pattern.as_matrix().shape();
    let mut out = Vec::new();
    for c in 0..k {
        for r in 0..j {
            if spec.is_free(r, c) {
                out.push(FreeParam::Loading { row: r, col: c });
            }
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            out.push(FreeParam::FactorCorr { k: a, l: b });
        }
    }
    for r in 0..j {
        out.push(FreeParam::LogUniqueness { row: r });
    }
    out
}

struct Layout {
    params: Vec<FreeParam>,
    j: usize,
    k: usize,
}

impl Layout {
    fn unpack(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut lambda = DMatrix::zeros(self.j, self.k);
        let mut phi = DMatrix::identity(self.k, self.k);
        let mut v = DVector::zeros(self.j);
        for (i, p) in self.params.iter().enumerate() {
            match *p {
                FreeParam::Loading { row, col } => lambda[(row, col)] = x[i],
                FreeParam::FactorCorr { k, l } => {
                    phi[(k, l)] = x[i];
                    phi[(l, k)] = x[i];
                }
                FreeParam::LogUniqueness { row } => v[row] = x[i],
            }
        }
        (lambda, phi, v)
    }

    fn pack(&self, lambda: &DMatrix<f64>, phi: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.params.len(),
            self.params.iter().map(|p| match *p {
                FreeParam::Loading { row, col } => lambda[(row, col)],
                FreeParam::FactorCorr { k, l } => phi[(k, l)],
                FreeParam::LogUniqueness { row } => v[row],
            }),
        )
    }
}

fn validate_spec(spec: &CfaSpec, j: usize) -> Result<()> {
    if spec.pattern.n_variables() != j {
        return Err(Error::DimensionMismatch(format!(
            "pattern has {} rows but the sample has {j} variables",
            spec.pattern.n_variables()
        )));
    }
    if spec.pattern.n_factors() > j {
        return Err(Error::InvalidInput("more factors than variables".into()));
    }
    if let Some(&r) = spec.free_rows.iter().find(|&&r| r >= j) {
        return Err(Error::InvalidInput(format!("free row {r} out of range")));
    }
    for c in 0..spec.pattern.n_factors() {
        if (0..j).all(|r| !spec.is_free(r, c)) {
            return Err(Error::DegeneratePattern(format!("factor {c} has no free loading")));
        }
    }
    Ok(())
}

/// Default start: pattern-signed loadings of size `0.6 sqrt(s_jj)` shared
/// across a row's nonzero entries, small positive values on free rows,
/// `Φ = I` and the implied residual variances.
fn default_start(sample: &SampleCovariance, spec: &CfaSpec) -> FactorModelParams {
    let s = sample.as_matrix();
    let (j, k) = spec.pattern.as_matrix().shape();
    let mut lambda = DMatrix::zeros(j, k);
    for r in 0..j {
        let sd = s[(r, r)].sqrt();
        if spec.free_rows.contains(&r) {
            for c in 0..k {
                lambda[(r, c)] = 0.1 * sd;
            }
            continue;
        }
        let nnz = (0..k).filter(|&c| spec.pattern.get(r, c) != 0).count();
        for c in 0..k {
            let sgn = spec.pattern.get(r, c) as f64;
            lambda[(r, c)] = sgn * 0.6 * sd / (nnz.max(1) as f64).sqrt();
        }
    }
    let common = &lambda * &lambda.transpose();
    let omega = DVector::from_fn(j, |r, _| (s[(r, r)] - common[(r, r)]).max(0.1 * s[(r, r)]));
    FactorModelParams {
        loadings: LoadingMatrix::new(lambda).expect("finite start"),
        factor_cov: FactorCovariance::identity(k),
        uniqueness: Uniqueness::new(omega).expect("positive start"),
    }
}

/// ML fit of the CFA model described by `spec`.
///
/// A fit whose information matrix is ill conditioned is returned inside
/// `Error::NonIdentified`, with `identified = false` and no standard errors.
pub fn fit_cfa(sample: &SampleCovariance, spec: &CfaSpec, opts: &CfaOptions) -> Result<CfaFit> {
    let j = sample.dim();
    validate_spec(spec, j)?;
    let k = spec.pattern.n_factors();
    let layout = Layout {
        params: free_parameters(spec),
        j,
        k,
    };
    let n = layout.params.len();
    let floor = heywood_floor(sample);

    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let upper = DVector::from_element(n, f64::INFINITY);
    let mut upper = upper;
    for (i, p) in layout.params.iter().enumerate() {
        match *p {
            FreeParam::Loading { row, col } if !spec.free_rows.contains(&row) => match spec.pattern.get(row, col) {
                1 => lower[i] = 0.0,
                -1 => upper[i] = 0.0,
                _ => {}
            },
            FreeParam::LogUniqueness { .. } => lower[i] = floor,
            _ => {}
        }
    }

    let start = match &opts.start {
        Some(p) => {
            if p.n_variables() != j || p.n_factors() != k {
                return Err(Error::DimensionMismatch("CFA start has wrong dimensions".into()));
            }
            p.clone()
        }
        None => default_start(sample, spec),
    };
    let x0 = layout.pack(
        start.loadings.as_matrix(),
        start.factor_cov.as_matrix(),
        &start.uniqueness.log(),
    );

    let s = sample.as_matrix();
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (lambda, phi, v) = layout.unpack(x);
        if k > 1 && phi.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("factor covariance not positive definite".into()));
        }
        let omega = v.map(f64::exp);
        let sigma = implied_cov_raw(&lambda, &phi, &omega);
        let eval = discrepancy_eval(&sigma, s)?;
        let m_lambda = &eval.m * &lambda;
        let d_lambda = &m_lambda * &phi * 2.0;
        let d_phi = lambda.transpose() * &m_lambda;
        let g = DVector::from_iterator(
            n,
            layout.params.iter().map(|p| match *p {
                FreeParam::Loading { row, col } => d_lambda[(row, col)],
                FreeParam::FactorCorr { k, l } => 2.0 * d_phi[(k, l)],
                FreeParam::LogUniqueness { row } => eval.m[(row, row)] * omega[row],
            }),
        );
        Ok((eval.value, g))
    };
    let bfgs = BoxBfgsOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        line_search: LineSearch::default(),
    };
    let out = minimize_box(objective, x0, &lower, &upper, &bfgs)?;
    let (lambda, phi, v) = layout.unpack(&out.x);

    let boundary = layout
        .params
        .iter()
        .filter_map(|p| match *p {
            FreeParam::Loading { row, col }
                if !spec.free_rows.contains(&row) && lambda[(row, col)].abs() < BOUNDARY_TOL =>
            {
                Some((row, col))
            }
            _ => None,
        })
        .collect();

    let params = FactorModelParams::new(
        LoadingMatrix::new(lambda)?,
        FactorCovariance::new(phi)?,
        Uniqueness::from_log(&v)?,
    )?;
    let n_obs = sample.n_obs();
    let loglik = log_likelihood_from_discrepancy(out.value, n_obs, j);
    let bic = -2.0 * loglik + n as f64 * (n_obs as f64).ln();
    let mut fit = CfaFit {
        params,
        spec: spec.clone(),
        discrepancy: out.value,
        loglik,
        bic,
        n_free_params: n,
        n_obs,
        free_params: layout.params,
        std_errors: None,
        identified: true,
        info_condition: f64::NAN,
        boundary,
        converged: out.converged,
        iterations: out.iterations,
    };

    let info = information_matrix(&fit, sample, false, None)?;
    // loadings held at their sign boundary are treated as fixed
    let keep: Vec<usize> = (0..n)
        .filter(|&i| match fit.free_params[i] {
            FreeParam::Loading { row, col } => !fit.boundary.contains(&(row, col)),
            _ => true,
        })
        .collect();
    let (condition, std_errors) = reduced_std_errors(&info.matrix, &keep);
    fit.info_condition = condition;
    if condition > opts.ident_cutoff {
        fit.identified = false;
        return Err(Error::NonIdentified {
            condition,
            fit: Box::new(fit),
        });
    }
    fit.std_errors = std_errors;
    if !out.converged {
        return Err(Error::NotConverged {
            max_iter: opts.max_iter,
            best: Box::new(BestIterate::Cfa(fit)),
        });
    }
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct InformationMatrix {
    /// Observed information `(N/2) ∂²L/∂θ∂θ'` over the free parameters.
    pub matrix: DMatrix<f64>,
    /// Asymptotic covariance of the estimates: the inverse information, or
    /// the sandwich form when requested.
    pub covariance: Option<DMatrix<f64>>,
    /// Ratio of extreme absolute eigenvalues; infinite when the matrix is
    /// not positive definite.
    pub condition: f64,
}

impl InformationMatrix {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        let cov = self.covariance.as_ref()?;
        let se: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
        se.iter().all(|s| s.is_finite()).then_some(se)
    }
}

/// Per-parameter rank-two factors `Σ_a = x_a y_a' + y_a x_a'`.
fn first_derivative_factors(
    params: &[FreeParam],
    lambda: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    omega: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let j = lambda.nrows();
    let lphi = lambda * phi;
    let n = params.len();
    let mut x = DMatrix::zeros(j, n);
    let mut y = DMatrix::zeros(j, n);
    for (i, p) in params.iter().enumerate() {
        match *p {
            FreeParam::Loading { row, col } => {
                x[(row, i)] = 1.0;
                y.set_column(i, &lphi.column(col));
            }
            FreeParam::FactorCorr { k, l } => {
                x.set_column(i, &lambda.column(k));
                y.set_column(i, &lambda.column(l));
            }
            FreeParam::LogUniqueness { row } => {
                x[(row, i)] = 1.0;
                y[(row, i)] = 0.5 * omega[row];
            }
        }
    }
    (x, y)
}

/// `tr(A Σ_a B Σ_b)` for all pairs, with `Σ_a = x_a y_a' + y_a x_a'`.
fn trace_products(x: &DMatrix<f64>, y: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ax, ay, bx, by) = (a * x, a * y, b * x, b * y);
    let a_xx = x.transpose() * &ax;
    let a_xy = x.transpose() * &ay;
    let a_yx = y.transpose() * &ax;
    let a_yy = y.transpose() * &ay;
    let b_xx = x.transpose() * &bx;
    let b_xy = x.transpose() * &by;
    let b_yx = y.transpose() * &bx;
    let b_yy = y.transpose() * &by;
    let n = x.ncols();
    DMatrix::from_fn(n, n, |p, q| {
        b_yx[(p, q)] * a_yx[(q, p)]
            + b_yy[(p, q)] * a_xx[(q, p)]
            + b_xx[(p, q)] * a_yy[(q, p)]
            + b_xy[(p, q)] * a_xy[(q, p)]
    })
}

/// Hessian of `L = log det Σ + tr(Σ^{-1} S)` over the free parameters.
pub(crate) fn discrepancy_hessian(
    params: &[FreeParam],
    lambda: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    omega: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let sigma = implied_cov_raw(lambda, phi, omega);
    let eval = discrepancy_eval(&sigma, s)?;
    let p = &eval.sigma_inv;
    let w = p * s * p;
    let (x, y) = first_derivative_factors(params, lambda, phi, omega);
    let ppp = trace_products(&x, &y, p, p);
    let pwp = trace_products(&x, &y, p, &w);
    let mut h = pwp * 2.0 - ppp;
    let m = &eval.m;
    let n = params.len();
    for a in 0..n {
        for b in a..n {
            let second = match (params[a], params[b]) {
                (FreeParam::Loading { row: j, col: k }, FreeParam::Loading { row: i, col: l }) => {
                    2.0 * phi[(k, l)] * m[(i, j)]
                }
                (FreeParam::Loading { row: j, col: c }, FreeParam::FactorCorr { k, l })
                | (FreeParam::FactorCorr { k, l }, FreeParam::Loading { row: j, col: c }) => {
                    let mut z = DVector::zeros(lambda.nrows());
                    if c == k {
                        z += lambda.column(l);
                    }
                    if c == l {
                        z += lambda.column(k);
                    }
                    2.0 * (m.row(j) * z)[0]
                }
                (FreeParam::LogUniqueness { row: i }, FreeParam::LogUniqueness { row: r }) if i == r => {
                    omega[i] * m[(i, i)]
                }
                _ => 0.0,
            };
            h[(a, b)] += second;
            if a != b {
                h[(b, a)] += second;
            }
        }
    }
    Ok(linalg::symmetrize(&h))
}

fn info_condition(m: &DMatrix<f64>) -> f64 {
    let eig = linalg::sym_eigenvalues(m);
    let lo = eig.first().copied().unwrap_or(0.0);
    let hi = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Condition number and standard errors from the information restricted to
/// the parameters in `keep`; excluded parameters get NaN errors.
fn reduced_std_errors(info: &DMatrix<f64>, keep: &[usize]) -> (f64, Option<Vec<f64>>) {
    let sub = info.select_rows(keep).select_columns(keep);
    let condition = info_condition(&sub);
    if !condition.is_finite() {
        return (condition, None);
    }
    let Some(inv) = sub.try_inverse() else {
        return (f64::INFINITY, None);
    };
    let mut se = vec![f64::NAN; info.nrows()];
    for (a, &i) in keep.iter().enumerate() {
        se[i] = inv[(a, a)].sqrt();
    }
    let ok = keep.iter().all(|&i| se[i].is_finite());
    (condition, ok.then_some(se))
}

/// Observed information of a fitted CFA model, or its sandwich-corrected
/// covariance when `robust` is set; the latter needs the raw data rows.
pub fn information_matrix(
    fit: &CfaFit,
    sample: &SampleCovariance,
    robust: bool,
    data: Option<&DMatrix<f64>>,
) -> Result<InformationMatrix> {
    if robust && data.is_none() {
        return Err(Error::RequiresRawData);
    }
    let lambda = fit.params.loadings.as_matrix();
    let phi = fit.params.factor_cov.as_matrix();
    let omega = fit.params.uniqueness.as_vector();
    let h = discrepancy_hessian(&fit.free_params, lambda, phi, omega, sample.as_matrix())?;
    let info = h * (0.5 * sample.n_obs() as f64);
    let condition = info_condition(&info);
    let inverse = if condition.is_finite() {
        info.clone().try_inverse().map(|m| linalg::symmetrize(&m))
    } else {
        None
    };
    let covariance = match (robust, data, inverse) {
        (false, _, inv) => inv,
        (true, Some(raw), Some(inv)) => {
            let sigma = implied_cov_raw(lambda, phi, omega);
            let p = linalg::spd_inverse(&sigma)?.inverse;
            let (x, y) = first_derivative_factors(&fit.free_params, lambda, phi, omega);
            let py = &p * &y;
            let n = fit.free_params.len();
            // -½ tr(P Σ_a) = -x_a' P y_a
            let base = DVector::from_fn(n, |a, _| -x.column(a).dot(&py.column(a)));
            let centered = center_columns(raw);
            let mut meat = DMatrix::zeros(n, n);
            for row in centered.row_iter() {
                let z = &p * row.transpose();
                // ½ z' Σ_a z = (z' x_a)(z' y_a)
                let zx = x.transpose() * &z;
                let zy = y.transpose() * &z;
                let score = DVector::from_fn(n, |a, _| base[a] + zx[a] * zy[a]);
                meat.ger(1.0, &score, &score, 1.0);
            }
            Some(linalg::symmetrize(&(&inv * meat * &inv)))
        }
        (true, _, None) => None,
        (true, None, _) => unreachable!("checked above"),
    };
    Ok(InformationMatrix {
        matrix: info,
        covariance,
        condition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub param: FreeParam,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Standard normal quantile `z_{1-α/2}`.
pub fn normal_critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - 0.5 * alpha))
}

/// `estimate ± z_{1-α/2} se` for every free parameter.
pub fn wald_intervals(fit: &CfaFit, alpha: f64) -> Result<Vec<WaldInterval>> {
    let z = normal_critical_value(alpha)?;
    let se = fit.std_errors.as_ref().ok_or(Error::NoStandardErrors)?;
    Ok(fit
        .free_params
        .iter()
        .zip(se)
        .map(|(p, &s)| {
            let est = fit.estimate(p);
            WaldInterval {
                param: *p,
                estimate: est,
                std_error: s,
                lower: est - z * s,
                upper: est + z * s,
            }
        })
        .collect())
}
