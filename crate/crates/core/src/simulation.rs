//! Seeded simulation studies: draw samples from a fixture, run the rotation
//! and LASSO pipelines, align each estimate to the truth and aggregate the
//! evaluation metrics.
//!
//! Every (sample size, replication) pair draws from its own ChaCha stream
//! keyed by the seed, the sample size and the replication index, so results
//! do not depend on how replications are scheduled across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfa::{CfaOptions, SignPattern};
use crate::data::{format_number, SCHEMA_VERSION};
use crate::efa::{fit_efa, OptimOptions};
use crate::error::{Error, Result};
use crate::fixtures::{by_name, Fixture};
use crate::lasso::{lasso_path, LassoOptions, LassoResult};
use crate::metrics::{
    align_matrix, auc, ecic, roc_curve, roc_thresholds, sign_agreement, tpr_tnr, true_selection_rate, IntervalMatrix,
};
use crate::model::{implied_covariance, LoadingMatrix, SampleCovariance};
use crate::rotation::{rotate_gp_smooth, rotate_irgp, GpOptions, IrgpOptions, RotationCriterion, RotationResult};
use crate::selection::{post_selection_intervals, select_model, ThresholdGrid};

/// Share of failed replications above which a run is reported as failed.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodFamily {
    LpRotation,
    SmoothRotation,
    Lasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothCriterion {
    Quartimin,
    Geomin,
}

/// One concrete estimator of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    LpRotation { p: f64 },
    SmoothRotation { criterion: SmoothCriterion },
    Lasso { gamma: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::LpRotation { p } => format!("lp(p={p})"),
            Method::SmoothRotation {
                criterion: SmoothCriterion::Quartimin,
            } => "quartimin".into(),
            Method::SmoothRotation {
                criterion: SmoothCriterion::Geomin,
            } => "geomin".into(),
            Method::Lasso { gamma } => format!("lasso(gamma={gamma})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSpec {
    /// Name of a shipped fixture.
    pub fixture: String,
    pub sample_sizes: Vec<usize>,
    pub n_replications: usize,
    pub seed: u64,
    pub methods: Vec<MethodFamily>,
    pub p_values: Vec<f64>,
    pub gammas: Vec<f64>,
    pub smooth_criteria: Vec<SmoothCriterion>,
    /// Thresholds for model selection; the default grid when empty.
    pub thresholds: Vec<f64>,
    /// Run the BIC selection step for rotation methods.
    pub select: bool,
    /// Compute post-selection intervals (J CFA fits per replication).
    pub intervals: bool,
    pub alpha: f64,
    pub epsilon: f64,
    pub random_starts: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            fixture: "study1-15x3".into(),
            sample_sizes: vec![400, 800, 1600],
            n_replications: 50,
            seed: 0,
            methods: vec![MethodFamily::LpRotation, MethodFamily::Lasso],
            p_values: vec![0.5, 1.0],
            gammas: vec![0.01, 0.05, 0.1, 0.2, 0.5],
            smooth_criteria: vec![SmoothCriterion::Quartimin, SmoothCriterion::Geomin],
            thresholds: Vec::new(),
            select: true,
            intervals: false,
            alpha: 0.05,
            epsilon: 1e-4,
            random_starts: 10,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        by_name(&self.fixture)?;
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::InvalidInput("sample sizes must be at least 2".into()));
        }
        if self.n_replications == 0 {
            return Err(Error::InvalidInput("need at least one replication".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods selected".into()));
        }
        if self.p_values.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidInput("p values must lie in (0, 1]".into()));
        }
        if self.gammas.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
            return Err(Error::InvalidInput("gammas must be finite and non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if self.methods.contains(&MethodFamily::LpRotation) && self.p_values.is_empty() {
            return Err(Error::InvalidInput("lp_rotation selected without p values".into()));
        }
        if self.methods.contains(&MethodFamily::Lasso) && self.gammas.is_empty() {
            return Err(Error::InvalidInput("lasso selected without gammas".into()));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<ThresholdGrid> {
        if self.thresholds.is_empty() {
            Ok(ThresholdGrid::default())
        } else {
            ThresholdGrid::new(self.thresholds.clone())
        }
    }

    /// Concrete estimators in a fixed order.
    pub fn expand_methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        for fam in &self.methods {
            match fam {
                MethodFamily::LpRotation => out.extend(self.p_values.iter().map(|&p| Method::LpRotation { p })),
                MethodFamily::SmoothRotation => out.extend(
                    self.smooth_criteria
                        .iter()
                        .map(|&criterion| Method::SmoothRotation { criterion }),
                ),
                MethodFamily::Lasso => out.extend(self.gammas.iter().map(|&gamma| Method::Lasso { gamma })),
            }
        }
        out
    }

    /// Short digest identifying a method together with every option that
    /// affects its output.
    pub fn options_hash(&self, method: &Method) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            method: &'a Method,
            fixture: &'a str,
            thresholds: Vec<f64>,
            select: bool,
            intervals: bool,
            alpha: f64,
            epsilon: f64,
            random_starts: usize,
        }
        let key = Key {
            method,
            fixture: &self.fixture,
            thresholds: self.grid().map(|g| g.values().to_vec()).unwrap_or_default(),
            select: self.select,
            intervals: self.intervals,
            alpha: self.alpha,
            epsilon: self.epsilon,
            random_starts: self.random_starts,
        };
        let json = serde_json::to_vec(&key).expect("serialisable key");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Generator for one replication.
pub fn replication_rng(seed: u64, n_obs: usize, rep: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((n_obs as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    rng.set_stream(rep as u64);
    rng
}

/// `n` draws from N(0, Σ) as an n×J matrix.
pub fn draw_normal<R: Rng>(sigma: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let l = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?
        .l();
    let z = DMatrix::<f64>::from_fn(n, sigma.nrows(), |_, _| StandardNormal.sample(rng));
    Ok(z * l.transpose())
}

/// Metrics of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    /// MSE of the method's loading estimate after alignment.
    pub mse: f64,
    /// MSE of the CFA refit at the selected pattern.
    pub mse_refit: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub tr: Option<f64>,
    pub sign_agreement: Option<f64>,
    pub selected_threshold: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Aligned estimate used for the ROC sweep.
    #[serde(skip)]
    pub estimate: DMatrix<f64>,
    #[serde(skip)]
    pub intervals: Option<IntervalMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub n_obs: usize,
    pub rep: usize,
    pub method: Method,
    pub outcome: std::result::Result<RepMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n_obs: usize,
    pub method: Method,
    pub replications: usize,
    pub failed: usize,
    pub mse: f64,
    pub mse_refit: f64,
    pub auc: f64,
    pub tr: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub sign_agreement: f64,
    pub mean_iterations: f64,
    /// Replication-averaged `(1 - TNR_c, TPR_c)` with the thresholds used.
    pub roc: Vec<(f64, f64, f64)>,
    pub ecic: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub spec: SimulationSpec,
    pub truth: DMatrix<f64>,
    pub records: Vec<ReplicationRecord>,
    pub summary: Vec<SummaryRow>,
}

impl SimulationOutput {
    pub fn failure_rate(&self) -> f64 {
        let failed = self.records.iter().filter(|r| r.outcome.is_err()).count();
        failed as f64 / self.records.len().max(1) as f64
    }
}

struct Context<'a> {
    spec: &'a SimulationSpec,
    fixture: &'a Fixture,
    truth_pattern: SignPattern,
    grid: ThresholdGrid,
}

fn rotation_metrics(ctx: &Context, sample: &SampleCovariance, rot: RotationResult) -> Result<RepMetrics> {
    let truth = ctx.fixture.loadings();
    let t = align_matrix(rot.rotated_loadings.as_matrix(), truth)?;
    let estimate = t.apply(rot.rotated_loadings.as_matrix());
    let mse = (&estimate - truth).norm_squared() / truth.len() as f64;
    let mut m = RepMetrics {
        mse,
        mse_refit: None,
        tpr: None,
        tnr: None,
        tr: None,
        sign_agreement: None,
        selected_threshold: None,
        iterations: rot.iterations,
        converged: rot.converged,
        estimate,
        intervals: None,
    };
    if !ctx.spec.select {
        return Ok(m);
    }
    let sel = select_model(sample, &rot, &ctx.grid, &CfaOptions::default())?;
    // the rotation's alignment is reused for everything derived from it
    let pattern = t.apply_pattern(&sel.selected_pattern);
    let (tpr, tnr) = tpr_tnr(&pattern, &ctx.truth_pattern)?;
    let refit = t.apply(sel.refit.params.loadings.as_matrix());
    m.mse_refit = Some((&refit - truth).norm_squared() / truth.len() as f64);
    m.tpr = Some(tpr);
    m.tnr = Some(tnr);
    m.tr = Some(true_selection_rate(&pattern, &ctx.truth_pattern)?);
    m.sign_agreement = Some(sign_agreement(&pattern, &ctx.truth_pattern)?);
    m.selected_threshold = Some(sel.selected_threshold);
    if ctx.spec.intervals {
        let ci = post_selection_intervals(sample, &sel.selected_pattern, ctx.spec.alpha, &CfaOptions::default())?;
        m.intervals = Some(ci.transform(&t));
    }
    Ok(m)
}

fn run_method(
    ctx: &Context,
    sample: &SampleCovariance,
    a: &LoadingMatrix,
    lasso_fits: &[(f64, std::result::Result<LassoResult, String>)],
    method: &Method,
    seed: u64,
) -> Result<RepMetrics> {
    match *method {
        Method::LpRotation { p } => {
            let opts = IrgpOptions {
                epsilon: ctx.spec.epsilon,
                random_starts: ctx.spec.random_starts,
                seed,
                ..IrgpOptions::default()
            };
            rotation_metrics(ctx, sample, rotate_irgp(a, p, &opts)?)
        }
        Method::SmoothRotation { criterion } => {
            let c = match criterion {
                SmoothCriterion::Quartimin => RotationCriterion::Quartimin,
                SmoothCriterion::Geomin => RotationCriterion::Geomin { geomin_eps: 0.01 },
            };
            rotation_metrics(ctx, sample, rotate_gp_smooth(a, &c, &GpOptions::default())?)
        }
        Method::Lasso { gamma } => {
            let fit = match lasso_fits.iter().find(|(g, _)| *g == gamma) {
                Some((_, Ok(fit))) => fit,
                _ => return Err(Error::InvalidInput(format!("no LASSO fit for gamma {gamma}"))),
            };
            let truth = ctx.fixture.loadings();
            let lambda = fit.params.loadings.as_matrix();
            let t = align_matrix(lambda, truth)?;
            let estimate = t.apply(lambda);
            let pattern = SignPattern::from_signs(&estimate);
            let (tpr, tnr) = tpr_tnr(&pattern, &ctx.truth_pattern)?;
            Ok(RepMetrics {
                mse: (&estimate - truth).norm_squared() / truth.len() as f64,
                mse_refit: None,
                tpr: Some(tpr),
                tnr: Some(tnr),
                tr: Some(true_selection_rate(&pattern, &ctx.truth_pattern)?),
                sign_agreement: Some(sign_agreement(&pattern, &ctx.truth_pattern)?),
                selected_threshold: None,
                iterations: fit.iterations,
                converged: fit.converged,
                estimate,
                intervals: None,
            })
        }
    }
}

/// LASSO fits for every requested γ, warm-started along the descending path.
/// Small γ leaves the likelihood nearly flat along rotations, so a cold start
/// drifts for a very long time before the penalty settles the orientation.
fn lasso_fits(
    ctx: &Context,
    sample: &SampleCovariance,
    methods: &[Method],
) -> Vec<(f64, std::result::Result<LassoResult, String>)> {
    let mut gammas: Vec<f64> = methods
        .iter()
        .filter_map(|m| match *m {
            Method::Lasso { gamma } => Some(gamma),
            _ => None,
        })
        .collect();
    if gammas.is_empty() {
        return Vec::new();
    }
    gammas.sort_by(|a, b| b.total_cmp(a));
    gammas.dedup();
    let k = ctx.fixture.loadings().ncols();
    match lasso_path(sample, k, &gammas, &LassoOptions::default()) {
        Ok(fits) => gammas
            .into_iter()
            .zip(fits)
            .map(|(g, r)| (g, r.map_err(|e| e.to_string())))
            .collect(),
        Err(e) => gammas.into_iter().map(|g| (g, Err(e.to_string()))).collect(),
    }
}

fn run_replication(
    ctx: &Context,
    sigma: &DMatrix<f64>,
    methods: &[Method],
    n_obs: usize,
    rep: usize,
) -> Vec<ReplicationRecord> {
    let mut rng = replication_rng(ctx.spec.seed, n_obs, rep);
    let start_seed: u64 = rng.random();
    let record = |method: &Method, outcome| ReplicationRecord {
        n_obs,
        rep,
        method: *method,
        outcome,
    };
    let prepared = draw_normal(sigma, n_obs, &mut rng)
        .and_then(|x| SampleCovariance::from_data(&x, false))
        .and_then(|s| {
            let k = ctx.fixture.loadings().ncols();
            let efa = fit_efa(&s, k, &OptimOptions::default()).or_else(|e| match e.into_best() {
                Some(crate::error::BestIterate::Initial(est)) => Ok(est),
                _ => Err(Error::InvalidInput("initial EFA fit failed".into())),
            })?;
            Ok((s, efa.loadings_a))
        });
    match prepared {
        Err(e) => methods
            .iter()
            .map(|m| record(m, Err(format!("initial fit: {e}"))))
            .collect(),
        Ok((s, a)) => {
            let lasso_fits = lasso_fits(ctx, &s, methods);
            methods
                .iter()
                .map(|m| {
                    if let Method::Lasso { gamma } = *m {
                        if let Some((_, Err(e))) = lasso_fits.iter().find(|(g, _)| *g == gamma) {
                            return record(m, Err(e.clone()));
                        }
                    }
                    let outcome = run_method(ctx, &s, &a, &lasso_fits, m, start_seed).map_err(|e| e.to_string());
                    record(m, outcome)
                })
                .collect()
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summarise(ctx: &Context, records: &[ReplicationRecord], n_obs: usize, method: &Method) -> Result<SummaryRow> {
    let rows: Vec<&ReplicationRecord> = records
        .iter()
        .filter(|r| r.n_obs == n_obs && r.method == *method)
        .collect();
    let ok: Vec<&RepMetrics> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let estimates: Vec<DMatrix<f64>> = ok.iter().map(|m| m.estimate.clone()).collect();
    let (roc, area) = if estimates.is_empty() {
        (Vec::new(), f64::NAN)
    } else {
        let thresholds = roc_thresholds(ctx.grid.values(), &estimates);
        let curve = roc_curve(&estimates, &ctx.truth_pattern, &thresholds)?;
        let area = auc(&curve);
        let roc = thresholds
            .iter()
            .zip(&curve)
            .filter(|(c, _)| ctx.grid.values().contains(c))
            .map(|(&c, &(fpr, tpr))| (c, fpr, tpr))
            .collect();
        (roc, area)
    };
    let intervals: Vec<IntervalMatrix> = ok.iter().filter_map(|m| m.intervals.clone()).collect();
    let coverage = if intervals.is_empty() {
        None
    } else {
        Some(ecic(&intervals, std::slice::from_ref(ctx.fixture.loadings()))?)
    };
    Ok(SummaryRow {
        n_obs,
        method: *method,
        replications: rows.len(),
        failed: rows.len() - ok.len(),
        mse: mean(ok.iter().map(|m| m.mse)),
        mse_refit: mean(ok.iter().filter_map(|m| m.mse_refit)),
        auc: area,
        tr: mean(ok.iter().filter_map(|m| m.tr)),
        tpr: mean(ok.iter().filter_map(|m| m.tpr)),
        tnr: mean(ok.iter().filter_map(|m| m.tnr)),
        sign_agreement: mean(ok.iter().filter_map(|m| m.sign_agreement)),
        mean_iterations: mean(ok.iter().map(|m| m.iterations as f64)),
        roc,
        ecic: coverage,
    })
}

/// Runs the study on `jobs` worker threads (all cores when 0). Output is
/// identical for every value of `jobs`.
pub fn run_simulation(spec: &SimulationSpec, jobs: usize) -> Result<SimulationOutput> {
    spec.validate()?;
    let fixture = by_name(&spec.fixture)?;
    let ctx = Context {
        spec,
        truth_pattern: fixture.pattern(),
        fixture: &fixture,
        grid: spec.grid()?,
    };
    let sigma = implied_covariance(&fixture.params);
    let methods = spec.expand_methods();
    let tasks: Vec<(usize, usize)> = spec
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..spec.n_replications).map(move |r| (n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let records: Vec<ReplicationRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, r)| run_replication(&ctx, &sigma, &methods, n, r))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    let mut summary = Vec::new();
    for &n in &spec.sample_sizes {
        for m in &methods {
            summary.push(summarise(&ctx, &records, n, m)?);
        }
    }
    Ok(SimulationOutput {
        spec: spec.clone(),
        truth: fixture.loadings().clone(),
        records,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), format_number)
}

fn header<W: Write>(w: &mut W) -> Result<()> {
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    Ok(())
}

/// Per-replication log, one row per (sample size, replication, method).
pub fn write_replications<W: Write>(out: &SimulationOutput, mut w: W) -> Result<()> {
    header(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "seed",
        "rep",
        "method",
        "options_hash",
        "n",
        "status",
        "mse",
        "mse_refit",
        "tpr",
        "tnr",
        "tr",
        "sign_agreement",
        "selected_threshold",
        "iterations",
        "converged",
        "error",
    ])?;
    for r in &out.records {
        let mut rec = vec![
            out.spec.seed.to_string(),
            r.rep.to_string(),
            r.method.label(),
            out.spec.options_hash(&r.method),
            r.n_obs.to_string(),
        ];
        match &r.outcome {
            Ok(m) => rec.extend([
                "ok".into(),
                format_number(m.mse),
                opt(m.mse_refit),
                opt(m.tpr),
                opt(m.tnr),
                opt(m.tr),
                opt(m.sign_agreement),
                opt(m.selected_threshold),
                m.iterations.to_string(),
                m.converged.to_string(),
                String::new(),
            ]),
            Err(e) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n("nan".to_string(), 7));
                rec.extend(["0".into(), "false".into(), e.clone()]);
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Method × sample size table of averaged metrics.
pub fn write_summary<W: Write>(out: &SimulationOutput, mut w: W) -> Result<()> {
    header(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "seed",
        "rep",
        "method",
        "options_hash",
        "n",
        "replications",
        "failed",
        "mse",
        "mse_refit",
        "auc",
        "tr",
        "tpr",
        "tnr",
        "sign_agreement",
        "mean_iterations",
    ])?;
    for s in &out.summary {
        wtr.write_record([
            out.spec.seed.to_string(),
            "all".into(),
            s.method.label(),
            out.spec.options_hash(&s.method),
            s.n_obs.to_string(),
            s.replications.to_string(),
            s.failed.to_string(),
            format_number(s.mse),
            format_number(s.mse_refit),
            format_number(s.auc),
            format_number(s.tr),
            format_number(s.tpr),
            format_number(s.tnr),
            format_number(s.sign_agreement),
            format_number(s.mean_iterations),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Averaged TPR and TNR at every grid threshold.
pub fn write_roc<W: Write>(out: &SimulationOutput, mut w: W) -> Result<()> {
    header(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["seed", "rep", "method", "options_hash", "n", "threshold", "tpr", "tnr"])?;
    for s in &out.summary {
        for &(c, fpr, tpr) in &s.roc {
            wtr.write_record([
                out.spec.seed.to_string(),
                "all".into(),
                s.method.label(),
                out.spec.options_hash(&s.method),
                s.n_obs.to_string(),
                format_number(c),
                format_number(tpr),
                format_number(1.0 - fpr),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Mean loading MSE against γ for every LASSO method and sample size.
pub fn write_gamma_path<W: Write>(out: &SimulationOutput, mut w: W) -> Result<()> {
    header(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["seed", "rep", "method", "options_hash", "n", "gamma", "mse"])?;
    for s in &out.summary {
        let Method::Lasso { gamma } = s.method else { continue };
        wtr.write_record([
            out.spec.seed.to_string(),
            "all".into(),
            s.method.label(),
            out.spec.options_hash(&s.method),
            s.n_obs.to_string(),
            format_number(gamma),
            format_number(s.mse),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Entrywise interval coverage, one row per loading.
pub fn write_ecic<W: Write>(out: &SimulationOutput, mut w: W) -> Result<()> {
    header(&mut w)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "seed",
        "rep",
        "method",
        "options_hash",
        "n",
        "row",
        "col",
        "truth",
        "coverage",
    ])?;
    for s in &out.summary {
        let Some(cov) = &s.ecic else { continue };
        for r in 0..cov.nrows() {
            for c in 0..cov.ncols() {
                wtr.write_record([
                    out.spec.seed.to_string(),
                    "all".into(),
                    s.method.label(),
                    out.spec.options_hash(&s.method),
                    s.n_obs.to_string(),
                    (r + 1).to_string(),
                    (c + 1).to_string(),
                    format_number(out.truth[(r, c)]),
                    format_number(cov[(r, c)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `summary.csv`, `replications.csv`, `roc.csv`, `gamma_path.csv`
/// and, when intervals were computed, `ecic.csv` into `dir`.
pub fn write_outputs(out: &SimulationOutput, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&mut std::fs::File) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        f(&mut file)?;
        written.push(path);
        Ok(())
    };
    emit("summary.csv", &|f| write_summary(out, f))?;
    emit("replications.csv", &|f| write_replications(out, f))?;
    emit("roc.csv", &|f| write_roc(out, f))?;
    emit("gamma_path.csv", &|f| write_gamma_path(out, f))?;
    if out.spec.intervals {
        emit("ecic.csv", &|f| write_ecic(out, f))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SimulationSpec {
        SimulationSpec {
            fixture: "simple-6x2".into(),
            sample_sizes: vec![300],
            n_replications: 3,
            seed: 11,
            p_values: vec![1.0],
            gammas: vec![0.05],
            random_starts: 2,
            ..SimulationSpec::default()
        }
    }

    #[test]
    fn substreams_depend_on_every_key() {
        let draw = |s, n, r| replication_rng(s, n, r).random::<u64>();
        let base = draw(1, 100, 0);
        assert_eq!(base, draw(1, 100, 0));
        assert_ne!(base, draw(2, 100, 0));
        assert_ne!(base, draw(1, 200, 0));
        assert_ne!(base, draw(1, 100, 1));
    }

    #[test]
    fn normal_draws_match_the_covariance() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let x = draw_normal(&sigma, 200_000, &mut replication_rng(0, 0, 0)).unwrap();
        let s = SampleCovariance::from_data(&x, false).unwrap();
        assert!((s.as_matrix() - &sigma).amax() < 0.02);
    }

    #[test]
    fn methods_expand_in_order() {
        let spec = SimulationSpec {
            methods: vec![
                MethodFamily::Lasso,
                MethodFamily::LpRotation,
                MethodFamily::SmoothRotation,
            ],
            ..SimulationSpec::default()
        };
        let labels: Vec<String> = spec.expand_methods().iter().map(Method::label).collect();
        assert_eq!(labels[0], "lasso(gamma=0.01)");
        assert_eq!(labels[5], "lp(p=0.5)");
        assert_eq!(labels[7], "quartimin");
        assert_eq!(labels.len(), 9);
    }

    #[test]
    fn options_hash_separates_methods_and_options() {
        let spec = small_spec();
        let a = spec.options_hash(&Method::LpRotation { p: 1.0 });
        assert_eq!(a.len(), 16);
        assert_eq!(a, spec.options_hash(&Method::LpRotation { p: 1.0 }));
        assert_ne!(a, spec.options_hash(&Method::LpRotation { p: 0.5 }));
        let other = SimulationSpec {
            epsilon: 1e-3,
            ..small_spec()
        };
        assert_ne!(a, other.options_hash(&Method::LpRotation { p: 1.0 }));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SimulationSpec {
                fixture: "none".into(),
                ..small_spec()
            },
            SimulationSpec {
                n_replications: 0,
                ..small_spec()
            },
            SimulationSpec {
                sample_sizes: vec![],
                ..small_spec()
            },
            SimulationSpec {
                p_values: vec![1.5],
                ..small_spec()
            },
            SimulationSpec {
                alpha: 1.0,
                ..small_spec()
            },
            SimulationSpec {
                thresholds: vec![0.3, 0.1],
                ..small_spec()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn output_does_not_depend_on_thread_count() {
        let spec = small_spec();
        let one = run_simulation(&spec, 1).unwrap();
        let three = run_simulation(&spec, 3).unwrap();
        let render = |o: &SimulationOutput| {
            let mut a = Vec::new();
            write_summary(o, &mut a).unwrap();
            write_replications(o, &mut a).unwrap();
            write_roc(o, &mut a).unwrap();
            write_gamma_path(o, &mut a).unwrap();
            a
        };
        assert_eq!(render(&one), render(&three));
    }

    #[test]
    fn single_replication_matches_a_direct_pipeline_run() {
        let spec = SimulationSpec {
            n_replications: 1,
            methods: vec![MethodFamily::LpRotation],
            ..small_spec()
        };
        let out = run_simulation(&spec, 1).unwrap();
        let fixture = by_name(&spec.fixture).unwrap();
        let mut rng = replication_rng(spec.seed, 300, 0);
        let seed: u64 = rng.random();
        let x = draw_normal(&implied_covariance(&fixture.params), 300, &mut rng).unwrap();
        let s = SampleCovariance::from_data(&x, false).unwrap();
        let a = fit_efa(&s, 2, &OptimOptions::default()).unwrap();
        let opts = IrgpOptions {
            random_starts: 2,
            seed,
            ..IrgpOptions::default()
        };
        let rot = rotate_irgp(&a.loadings_a, 1.0, &opts).unwrap();
        let t = align_matrix(rot.rotated_loadings.as_matrix(), fixture.loadings()).unwrap();
        let direct = (t.apply(rot.rotated_loadings.as_matrix()) - fixture.loadings()).norm_squared() / 12.0;
        let row = &out.summary[0];
        assert_eq!(row.mse, direct);
        assert_eq!(row.replications, 1);
        assert_eq!(row.failed, 0);
        assert_eq!(row.tr, 1.0);
    }

    #[test]
    fn csv_outputs_carry_schema_and_provenance() {
        let spec = SimulationSpec {
            intervals: true,
            n_replications: 2,
            ..small_spec()
        };
        let out = run_simulation(&spec, 2).unwrap();
        let mut buf = Vec::new();
        write_replications(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# schema_version=1");
        assert!(lines.next().unwrap().starts_with("seed,rep,method,options_hash,n,"));
        assert_eq!(lines.count(), 4);
        let mut buf = Vec::new();
        write_ecic(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // only the rotation method produces intervals
        assert_eq!(text.lines().count(), 2 + 12);
        assert!(out.failure_rate() == 0.0);
    }
}
