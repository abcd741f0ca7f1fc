//! Model selection by hard-thresholding a rotated solution and comparing
//! CFA refits by BIC, and row-by-row post-selection Wald intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfa::{fit_cfa, wald_intervals, CfaFit, CfaOptions, CfaSpec, FreeParam, SignPattern};
use crate::error::{Error, Result};
use crate::metrics::IntervalMatrix;
use crate::model::{FactorCovariance, FactorModelParams, LoadingMatrix, SampleCovariance, Uniqueness};
use crate::rotation::RotationResult;

pub use crate::metrics::hard_threshold;

/// Candidate thresholds, strictly positive and strictly ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("threshold grid is empty".into()));
        }
        if values.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidInput("thresholds must be finite and positive".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("thresholds must be strictly ascending".into()));
        }
        Ok(Self(values))
    }

    /// `n` equally spaced values from `lo` to `hi` inclusive.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![lo]);
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|i| lo + step * i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdGrid {
    /// 20 equally spaced values from 0.05 to 0.50.
    fn default() -> Self {
        Self::linspace(0.05, 0.50, 20).expect("valid default grid")
    }
}

/// Why a threshold produced no admissible model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    VacuousColumn { columns: Vec<usize> },
    NotIdentified { condition: f64 },
    NotConverged,
    FitFailed { message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdOutcome {
    pub c: f64,
    pub pattern: SignPattern,
    /// `None` when the pattern was skipped.
    pub bic: Option<f64>,
    pub identified: bool,
    pub skipped: Option<SkipReason>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_pattern: SignPattern,
    pub selected_threshold: f64,
    pub per_threshold: Vec<ThresholdOutcome>,
    /// CFA fit at the selected pattern, the reported point estimate.
    pub refit: CfaFit,
}

/// Start for a CFA fit: the loadings masked to the pattern, the rotated
/// factor correlations and the implied residual variances.
fn pattern_start(
    sample: &SampleCovariance,
    loadings: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    pattern: &SignPattern,
) -> Option<FactorModelParams> {
    let masked = DMatrix::from_fn(loadings.nrows(), loadings.ncols(), |r, c| {
        if pattern.get(r, c) == 0 {
            0.0
        } else {
            loadings[(r, c)]
        }
    });
    let s = sample.as_matrix();
    let common = &masked * phi * masked.transpose();
    let omega = DVector::from_fn(s.nrows(), |r, _| (s[(r, r)] - common[(r, r)]).max(0.1 * s[(r, r)]));
    FactorModelParams::new(
        LoadingMatrix::new(masked).ok()?,
        FactorCovariance::new(phi.clone()).ok()?,
        Uniqueness::new(omega).ok()?,
    )
    .ok()
}

fn fit_pattern(
    sample: &SampleCovariance,
    rotated: &RotationResult,
    pattern: &SignPattern,
    opts: &CfaOptions,
) -> std::result::Result<CfaFit, SkipReason> {
    let vacuous = pattern.vacuous_columns();
    if !vacuous.is_empty() {
        return Err(SkipReason::VacuousColumn { columns: vacuous });
    }
    let mut o = opts.clone();
    if o.start.is_none() {
        o.start = pattern_start(
            sample,
            rotated.rotated_loadings.as_matrix(),
            rotated.factor_cov.as_matrix(),
            pattern,
        );
    }
    match fit_cfa(sample, &CfaSpec::new(pattern.clone()), &o) {
        Ok(fit) => Ok(fit),
        Err(Error::NonIdentified { condition, .. }) => Err(SkipReason::NotIdentified { condition }),
        Err(Error::NotConverged { .. }) => Err(SkipReason::NotConverged),
        Err(e) => Err(SkipReason::FitFailed { message: e.to_string() }),
    }
}

/// Thresholds the rotated loadings at every grid value, refits each distinct
/// pattern by CFA and returns the pattern with the smallest BIC; ties go to
/// the smallest threshold.
pub fn select_model(
    sample: &SampleCovariance,
    rotated: &RotationResult,
    grid: &ThresholdGrid,
    opts: &CfaOptions,
) -> Result<SelectionResult> {
    let lambda = rotated.rotated_loadings.as_matrix();
    if lambda.nrows() != sample.dim() {
        return Err(Error::DimensionMismatch(
            "rotated loadings and sample covariance differ in size".into(),
        ));
    }
    let patterns: Vec<SignPattern> = grid.values().iter().map(|&c| hard_threshold(lambda, c)).collect();
    // neighbouring thresholds often give the same pattern; fit each once
    let mut distinct: Vec<&SignPattern> = Vec::new();
    let index: Vec<usize> = patterns
        .iter()
        .map(|p| match distinct.iter().position(|q| *q == p) {
            Some(i) => i,
            None => {
                distinct.push(p);
                distinct.len() - 1
            }
        })
        .collect();
    let fits: Vec<std::result::Result<CfaFit, SkipReason>> = distinct
        .par_iter()
        .map(|p| fit_pattern(sample, rotated, p, opts))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    let per_threshold = grid
        .values()
        .iter()
        .zip(&patterns)
        .zip(&index)
        .enumerate()
        .map(|(i, ((&c, pattern), &f))| match &fits[f] {
            Ok(fit) => {
                if best.is_none_or(|(_, b)| fit.bic < b) {
                    best = Some((i, fit.bic));
                }
                ThresholdOutcome {
                    c,
                    pattern: pattern.clone(),
                    bic: Some(fit.bic),
                    identified: true,
                    skipped: None,
                }
            }
            Err(reason) => ThresholdOutcome {
                c,
                pattern: pattern.clone(),
                bic: None,
                identified: !matches!(reason, SkipReason::NotIdentified { .. }),
                skipped: Some(reason.clone()),
            },
        })
        .collect::<Vec<_>>();

    let (i, _) = best.ok_or(Error::NoAdmissibleModel {
        candidates: grid.values().len(),
    })?;
    let refit = fits[index[i]].clone().expect("selected fit is admissible");
    Ok(SelectionResult {
        selected_pattern: patterns[i].clone(),
        selected_threshold: grid.values()[i],
        per_threshold,
        refit,
    })
}

/// Row-by-row Wald intervals: for each variable `s` a CFA with row `s` free
/// and the remaining rows constrained by `pattern`. Rows whose fit fails or
/// is not identified get `(-∞, ∞)`.
pub fn post_selection_intervals(
    sample: &SampleCovariance,
    pattern: &SignPattern,
    alpha: f64,
    opts: &CfaOptions,
) -> Result<IntervalMatrix> {
    crate::cfa::normal_critical_value(alpha)?;
    let (j, k) = pattern.as_matrix().shape();
    if j != sample.dim() {
        return Err(Error::DimensionMismatch(
            "pattern and sample covariance differ in size".into(),
        ));
    }
    let rows: Vec<Option<Vec<(f64, f64)>>> = (0..j)
        .into_par_iter()
        .map(|s| row_intervals(sample, pattern, s, alpha, opts))
        .collect();
    let mut out = IntervalMatrix::unbounded(j, k);
    for (s, row) in rows.into_iter().enumerate() {
        if let Some(bounds) = row {
            for (c, (l, u)) in bounds.into_iter().enumerate() {
                out.lower[(s, c)] = l;
                out.upper[(s, c)] = u;
            }
        }
    }
    Ok(out)
}

fn row_intervals(
    sample: &SampleCovariance,
    pattern: &SignPattern,
    s: usize,
    alpha: f64,
    opts: &CfaOptions,
) -> Option<Vec<(f64, f64)>> {
    let spec = CfaSpec::with_free_row(pattern.clone(), s);
    let fit = fit_cfa(sample, &spec, opts).ok()?;
    let intervals = wald_intervals(&fit, alpha).ok()?;
    let k = pattern.n_factors();
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); k];
    for w in intervals {
        if let FreeParam::Loading { row, col } = w.param {
            if row == s {
                if !(w.lower.is_finite() && w.upper.is_finite()) {
                    return None;
                }
                bounds[col] = (w.lower, w.upper);
            }
        }
    }
    Some(bounds)
}
