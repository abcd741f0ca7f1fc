//! Factor-model parameter types, the model-implied covariance and the
//! normal-theory ML discrepancy with its analytic gradients.
//!
//! The model is `X = Λ ξ + e` with `Cov(ξ) = Φ` (unit diagonal) and
//! `Cov(e) = Ω` diagonal, so that `Σ(θ) = Λ Φ Λ' + Ω`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, spd_inverse};

const SYMMETRY_TOL: f64 = 1e-10;
const SYMMETRY_WARN: f64 = 1e-8;

/// A J×K loading matrix with finite entries and `J >= K >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingMatrix(DMatrix<f64>);

impl LoadingMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (j, k) = entries.shape();
        if k == 0 || j < k {
            return Err(Error::InvalidInput(format!(
                "loading matrix must satisfy J >= K >= 1, got {j}x{k}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("loading matrix has non-finite entries".into()));
        }
        Ok(Self(entries))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn n_variables(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Factor correlation matrix: symmetric, unit diagonal, positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCovariance(DMatrix<f64>);

impl FactorCovariance {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::InvalidInput(
                "factor covariance must be a non-empty square matrix".into(),
            ));
        }
        if linalg::max_asymmetry(&entries) > SYMMETRY_TOL {
            return Err(Error::InvalidInput("factor covariance is not symmetric".into()));
        }
        if entries.diagonal().iter().any(|d| (d - 1.0).abs() > SYMMETRY_TOL) {
            return Err(Error::InvalidInput("factor covariance must have unit diagonal".into()));
        }
        let sym = linalg::symmetrize(&entries);
        if linalg::sym_eigenvalues(&sym)[0] <= 0.0 {
            return Err(Error::InvalidInput("factor covariance is not positive definite".into()));
        }
        Ok(Self(sym))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    /// `T'T` for an oblique rotation matrix, with the diagonal pinned to one.
    pub fn from_rotation(t: &DMatrix<f64>) -> Self {
        let mut phi = linalg::symmetrize(&(t.transpose() * t));
        for k in 0..phi.nrows() {
            phi[(k, k)] = 1.0;
        }
        Self(phi)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Diagonal of the residual covariance Ω, on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness(DVector<f64>);

impl Uniqueness {
    pub fn new(diag: DVector<f64>) -> Result<Self> {
        if diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(
                "uniquenesses must be strictly positive and finite".into(),
            ));
        }
        Ok(Self(diag))
    }

    pub fn from_log(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.map(f64::exp))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn log(&self) -> DVector<f64> {
        self.0.map(f64::ln)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// θ = (Λ, Φ, Ω).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelParams {
    pub loadings: LoadingMatrix,
    pub factor_cov: FactorCovariance,
    pub uniqueness: Uniqueness,
}

impl FactorModelParams {
    pub fn new(loadings: LoadingMatrix, factor_cov: FactorCovariance, uniqueness: Uniqueness) -> Result<Self> {
        let (j, k) = loadings.as_matrix().shape();
        if factor_cov.as_matrix().nrows() != k {
            return Err(Error::DimensionMismatch(format!(
                "loadings have {k} factors but factor covariance is {0}x{0}",
                factor_cov.as_matrix().nrows()
            )));
        }
        if uniqueness.len() != j {
            return Err(Error::DimensionMismatch(format!(
                "loadings have {j} rows but uniqueness has length {}",
                uniqueness.len()
            )));
        }
        Ok(Self {
            loadings,
            factor_cov,
            uniqueness,
        })
    }

    pub fn n_variables(&self) -> usize {
        self.loadings.n_variables()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.n_factors()
    }
}

/// Parameters in the optimiser's coordinates: Φ = T'T with T upper
/// triangular, and `v = log ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamParams {
    pub loadings: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub log_uniq: DVector<f64>,
}

impl ReparamParams {
    pub fn phi(&self) -> DMatrix<f64> {
        self.t.transpose() * &self.t
    }

    pub fn omega(&self) -> DVector<f64> {
        self.log_uniq.map(f64::exp)
    }

    pub fn implied_covariance(&self) -> DMatrix<f64> {
        implied_cov_raw(&self.loadings, &self.phi(), &self.omega())
    }

    /// Back to the natural parameterisation.
    pub fn to_params(&self) -> Result<FactorModelParams> {
        FactorModelParams::new(
            LoadingMatrix::new(self.loadings.clone())?,
            FactorCovariance::from_rotation(&self.t),
            Uniqueness::from_log(&self.log_uniq)?,
        )
    }
}

/// Gradients of the ML discrepancy in the (Λ, T, v) coordinates.
#[derive(Debug, Clone)]
pub struct ReparamGradients {
    pub loadings: DMatrix<f64>,
    /// Supported on the upper triangle.
    pub t: DMatrix<f64>,
    pub log_uniq: DVector<f64>,
}

/// Sample covariance `S = Σ x_i x_i' / N` together with its sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCovariance {
    entries: DMatrix<f64>,
    n_obs: usize,
}

impl SampleCovariance {
    /// Symmetrises the input, warning when the asymmetry is larger than
    /// CSV round-tripping would explain.
    pub fn new(entries: DMatrix<f64>, n_obs: usize) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::InvalidInput(
                "sample covariance must be a non-empty square matrix".into(),
            ));
        }
        if n_obs == 0 {
            return Err(Error::InvalidInput("n_obs must be positive".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sample covariance has non-finite entries".into()));
        }
        let asym = linalg::max_asymmetry(&entries);
        if asym > SYMMETRY_WARN {
            warn!("sample covariance asymmetric by {asym:.3e}; symmetrising");
        }
        let entries = linalg::symmetrize(&entries);
        let eig = linalg::sym_eigenvalues(&entries);
        let scale = eig.last().copied().unwrap_or(0.0).abs().max(1.0);
        if eig[0] < -1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "sample covariance is not positive semidefinite (smallest eigenvalue {:.3e})",
                eig[0]
            )));
        }
        Ok(Self { entries, n_obs })
    }

    /// `S = X'X / N` after centring the columns; `bessel` switches the
    /// divisor to `N - 1`.
    pub fn from_data(data: &DMatrix<f64>, bessel: bool) -> Result<Self> {
        let n = data.nrows();
        if n < 2 {
            return Err(Error::InvalidInput("need at least two observations".into()));
        }
        let centered = center_columns(data);
        let divisor = if bessel { (n - 1) as f64 } else { n as f64 };
        Self::new(centered.transpose() * &centered / divisor, n)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn center_columns(data: &DMatrix<f64>) -> DMatrix<f64> {
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    centered
}

/// `Σ(θ) = Λ Φ Λ' + Ω`.
pub fn implied_covariance(params: &FactorModelParams) -> DMatrix<f64> {
    implied_cov_raw(
        params.loadings.as_matrix(),
        params.factor_cov.as_matrix(),
        params.uniqueness.as_vector(),
    )
}

pub(crate) fn implied_cov_raw(lambda: &DMatrix<f64>, phi: &DMatrix<f64>, omega: &DVector<f64>) -> DMatrix<f64> {
    let mut sigma = lambda * phi * lambda.transpose();
    for j in 0..sigma.nrows() {
        sigma[(j, j)] += omega[j];
    }
    linalg::symmetrize(&sigma)
}

/// Value of `L = log det Σ + tr(Σ^{-1} S)` together with `Σ^{-1}` and the
/// derivative `M = ∂L/∂Σ = Σ^{-1} - Σ^{-1} S Σ^{-1}`.
#[derive(Debug, Clone)]
pub(crate) struct DiscrepancyEval {
    pub value: f64,
    pub sigma_inv: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

pub(crate) fn discrepancy_eval(sigma: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DiscrepancyEval> {
    let inv = spd_inverse(sigma)?;
    let p = inv.inverse;
    let ps = &p * s;
    let value = inv.log_det + ps.trace();
    if !value.is_finite() {
        return Err(Error::SingularCovariance {
            condition: f64::INFINITY,
        });
    }
    let m = &p - &ps * &p;
    Ok(DiscrepancyEval {
        value,
        sigma_inv: p,
        m: linalg::symmetrize(&m),
    })
}

fn check_dims(params_dim: usize, sample: &SampleCovariance) -> Result<()> {
    if params_dim != sample.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model has {params_dim} variables but sample covariance is {0}x{0}",
            sample.dim()
        )));
    }
    Ok(())
}

/// ML discrepancy `log det Σ(θ) + tr(Σ(θ)^{-1} S)`.
pub fn ml_discrepancy(params: &FactorModelParams, sample: &SampleCovariance) -> Result<f64> {
    check_dims(params.n_variables(), sample)?;
    let sigma = implied_covariance(params);
    let cond = linalg::sym_condition(&sigma);
    if cond > linalg::SINGULAR_CONDITION {
        return Err(Error::SingularCovariance { condition: cond });
    }
    Ok(discrepancy_eval(&sigma, sample.as_matrix())?.value)
}

/// Gradients of the ML discrepancy with respect to Λ, T (upper triangle) and
/// `v = log ω`, where Φ = T'T.
pub fn ml_discrepancy_gradients(params: &ReparamParams, sample: &SampleCovariance) -> Result<(f64, ReparamGradients)> {
    check_dims(params.loadings.nrows(), sample)?;
    let phi = params.phi();
    let omega = params.omega();
    let sigma = implied_cov_raw(&params.loadings, &phi, &omega);
    let eval = discrepancy_eval(&sigma, sample.as_matrix())?;
    Ok((eval.value, reparam_gradients(params, &phi, &omega, &eval.m)))
}

pub(crate) fn reparam_gradients(
    params: &ReparamParams,
    phi: &DMatrix<f64>,
    omega: &DVector<f64>,
    m: &DMatrix<f64>,
) -> ReparamGradients {
    let m_lambda = m * &params.loadings;
    let d_lambda = &m_lambda * phi * 2.0;
    let g_phi = params.loadings.transpose() * &m_lambda;
    let mut d_t = &params.t * g_phi * 2.0;
    mask_upper(&mut d_t);
    let d_v = DVector::from_fn(omega.len(), |j, _| m[(j, j)] * omega[j]);
    ReparamGradients {
        loadings: d_lambda,
        t: d_t,
        log_uniq: d_v,
    }
}

pub(crate) fn mask_upper(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i.min(m.ncols()) {
            m[(i, j)] = 0.0;
        }
    }
}

/// Normal log-likelihood `-(N/2)(J log 2π + L)` for a discrepancy value `L`.
pub fn log_likelihood_from_discrepancy(discrepancy: f64, n_obs: usize, j: usize) -> f64 {
    -0.5 * n_obs as f64 * (j as f64 * (2.0 * std::f64::consts::PI).ln() + discrepancy)
}
