//! Subcommand implementations.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use lpfa::cfa::{fit_cfa, CfaOptions, CfaSpec, SignPattern};
use lpfa::data::{
    factor_names, format_number, read_covariance, read_raw, read_table_file, write_table, SCHEMA_VERSION,
};
use lpfa::efa::{fit_efa, InitialEstimate, OptimOptions};
use lpfa::fixtures::by_name;
use lpfa::lasso::{fit_lasso, lasso_path, LassoOptions, LassoResult};
use lpfa::metrics::{align_matrix, IntervalMatrix};
use lpfa::model::{LoadingMatrix, SampleCovariance};
use lpfa::rotation::{
    contour_scan_2x2, rotate_gp_smooth, rotate_irgp, ContourGrid, GpOptions, IrgpOptions, RotationCriterion,
    RotationResult,
};
use lpfa::selection::{post_selection_intervals, select_model, SkipReason, ThresholdGrid};
use lpfa::simulation::{run_simulation, write_outputs, SimulationSpec, MAX_FAILURE_RATE};
use lpfa::BestIterate;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::report::{
    document, emit, fixed, interval_json, interval_table, json_text, matrix, matrix_table, num, text_table, vector,
    write_interval_csv, Format,
};
use crate::{CfaArgs, EfaArgs, Failure, GridArgs, InputArgs, OutputArgs, RotationArgs, SmoothArg, EXIT_NOT_CONVERGED};

struct Loaded {
    names: Vec<String>,
    sample: SampleCovariance,
}

fn load(input: &InputArgs) -> Result<Loaded, Failure> {
    let open =
        || File::open(&input.input).map_err(|e| Failure::input(format!("cannot open {}: {e}", input.input.display())));
    let data = if input.covariance {
        let n = input
            .n_obs
            .ok_or_else(|| Failure::input("covariance input requires --n-obs"))?;
        if input.bessel {
            eprintln!("warning: --bessel has no effect on covariance input");
        }
        read_covariance(open()?, n)?
    } else {
        if input.n_obs.is_some() {
            eprintln!("warning: --n-obs is ignored for raw data; N is the number of rows");
        }
        read_raw(open()?)?
    };
    Ok(Loaded {
        names: data.variable_names.clone(),
        sample: data.sample_covariance(input.bessel)?,
    })
}

fn n_factors(input: &InputArgs, j: usize) -> Result<usize, Failure> {
    let k = input.factors.ok_or_else(|| Failure::input("--factors is required"))?;
    if k == 0 || k > j {
        return Err(Failure::input(format!("--factors must lie in 1..={j}, got {k}")));
    }
    Ok(k)
}

fn efa_options(efa: &EfaArgs) -> OptimOptions {
    OptimOptions {
        tol: efa.efa_tol,
        max_iter: efa.efa_max_iter,
    }
}

fn cfa_options(cfa: &CfaArgs) -> CfaOptions {
    CfaOptions {
        tol: cfa.cfa_tol,
        max_iter: cfa.cfa_max_iter,
        ident_cutoff: cfa.ident_cutoff,
        start: None,
    }
}

/// Splits a solver error into the best iterate it carries and the failure
/// to report once that iterate has been written out.
fn best_or_fail(e: lpfa::Error) -> (Option<BestIterate>, Failure) {
    let f = Failure::from(&e);
    (e.into_best(), f)
}

fn finish(
    doc: serde_json::Map<String, Value>,
    text: String,
    out: &OutputArgs,
    pending: Option<Failure>,
) -> Result<(), Failure> {
    match out.format {
        Format::Json => emit(&json_text(doc), out.output.as_deref())?,
        Format::Text => emit(&text, out.output.as_deref())?,
    }
    pending.map_or(Ok(()), Err)
}

fn write_loadings(path: Option<&Path>, names: &[String], m: &DMatrix<f64>) -> Result<(), Failure> {
    let Some(p) = path else { return Ok(()) };
    let f = File::create(p).map_err(|e| Failure::input(format!("cannot write {}: {e}", p.display())))?;
    write_table(f, names, &factor_names(m.ncols()), m)?;
    Ok(())
}

fn with_column(m: &DMatrix<f64>, extra: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone().insert_column(m.ncols(), 0.0);
    for (r, v) in extra.iter().enumerate() {
        out[(r, m.ncols())] = *v;
    }
    out
}

pub fn fit(input: &InputArgs, efa: &EfaArgs, out: &OutputArgs) -> Result<(), Failure> {
    let d = load(input)?;
    let k = n_factors(input, d.names.len())?;
    let (est, pending) = match fit_efa(&d.sample, k, &efa_options(efa)) {
        Ok(e) => (e, None),
        Err(e) => match best_or_fail(e) {
            (Some(BestIterate::Initial(e)), f) => (e, Some(f)),
            (_, f) => return Err(f),
        },
    };
    let a = est.loadings_a.as_matrix();
    let mut doc = document("fit");
    doc.insert("n_obs".into(), json!(d.sample.n_obs()));
    doc.insert("variables".into(), json!(d.names));
    doc.insert("factors".into(), json!(factor_names(k)));
    doc.insert("loadings".into(), matrix(a));
    doc.insert("uniqueness".into(), vector(est.uniqueness.as_vector()));
    doc.insert("discrepancy".into(), num(est.discrepancy_value));
    doc.insert("converged".into(), json!(est.converged));
    doc.insert("iterations".into(), json!(est.n_iterations));
    let mut cols = factor_names(k);
    cols.push("uniqueness".into());
    let text = format!(
        "Initial ML estimate (N = {}, J = {}, K = {k})\n\n{}\ndiscrepancy {}  iterations {}  converged {}\n",
        d.sample.n_obs(),
        d.names.len(),
        matrix_table(&d.names, &cols, &with_column(a, est.uniqueness.as_vector().as_slice())),
        format_number(est.discrepancy_value),
        est.n_iterations,
        est.converged
    );
    write_loadings(out.loadings_csv.as_deref(), &d.names, a)?;
    finish(doc, text, out, pending)
}

fn initial(sample: &SampleCovariance, k: usize, efa: &EfaArgs) -> Result<InitialEstimate, Failure> {
    fit_efa(sample, k, &efa_options(efa)).map_err(|e| Failure {
        message: format!("initial fit: {e}"),
        ..Failure::from(&e)
    })
}

fn criterion_label(rot: &RotationArgs) -> String {
    match (rot.p, rot.criterion) {
        (Some(p), _) => format!("lp(p={p})"),
        (None, Some(SmoothArg::Quartimin)) => "quartimin".into(),
        (None, _) => format!("geomin(eps={})", rot.geomin_eps),
    }
}

fn run_rotation(a: &LoadingMatrix, rot: &RotationArgs) -> lpfa::Result<RotationResult> {
    let irgp = IrgpOptions {
        epsilon: rot.epsilon,
        random_starts: rot.random_starts,
        seed: rot.seed,
        max_iter: rot.max_iter,
        ..IrgpOptions::default()
    };
    let start = match rot.warm_from_p {
        Some(q) => Some(rotate_irgp(a, q, &irgp)?.rotation),
        None => None,
    };
    match (rot.p, rot.criterion) {
        (Some(p), _) => rotate_irgp(a, p, &IrgpOptions { start, ..irgp }),
        (None, c) => {
            let criterion = match c {
                Some(SmoothArg::Quartimin) => RotationCriterion::Quartimin,
                _ => RotationCriterion::Geomin {
                    geomin_eps: rot.geomin_eps,
                },
            };
            let opts = GpOptions {
                max_iter: rot.max_iter,
                start,
                ..GpOptions::default()
            };
            rotate_gp_smooth(a, &criterion, &opts)
        }
    }
}

fn write_contour(path: &Path, grid: &ContourGrid) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::input(format!("cannot write {}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(f, "# schema_version={SCHEMA_VERSION}").map_err(io)?;
    writeln!(f, "theta1,theta2,value").map_err(io)?;
    for (i, t1) in grid.thetas.iter().enumerate() {
        for (j, t2) in grid.thetas.iter().enumerate() {
            writeln!(f, "{t1},{t2},{}", format_number(grid.values[(i, j)])).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

fn contour_summary(grid: &ContourGrid) -> Value {
    let (i, j, v) = grid.minimum();
    json!({
        "grid": grid.thetas.len(),
        "minimum": {
            "theta1": grid.thetas[i],
            "theta2": grid.thetas[j],
            "value": num(v),
            "cells_from_identity": num(grid.cells_from_identity_image(i, j)),
        },
        "value_at_identity": num(grid.values[(0, 0)]),
    })
}

fn contour_text(grid: &ContourGrid) -> String {
    let (i, j, v) = grid.minimum();
    format!(
        "grid minimum {} at (theta1, theta2) = ({:.4}, {:.4}), {:.1} cells from the nearest image of (0, 0); value at (0, 0) {}\n",
        fixed(v),
        grid.thetas[i],
        grid.thetas[j],
        grid.cells_from_identity_image(i, j),
        fixed(grid.values[(0, 0)])
    )
}

fn load_loading_table(path: &Path, j: usize, k: usize) -> Result<DMatrix<f64>, Failure> {
    let t = read_table_file(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if t.values.shape() != (j, k) {
        return Err(Failure::input(format!(
            "{}: expected a {j}x{k} table, found {}x{}",
            path.display(),
            t.values.nrows(),
            t.values.ncols()
        )));
    }
    Ok(t.values)
}

pub fn rotate(
    input: &InputArgs,
    efa: &EfaArgs,
    rot: &RotationArgs,
    align_to: Option<&Path>,
    contour: Option<(&Path, usize)>,
    out: &OutputArgs,
) -> Result<(), Failure> {
    let d = load(input)?;
    let k = n_factors(input, d.names.len())?;
    if contour.is_some() && (k != 2 || rot.p.is_none()) {
        return Err(Failure::input("--contour needs --p and exactly two factors"));
    }
    let est = initial(&d.sample, k, efa)?;
    let (res, pending) = match run_rotation(&est.loadings_a, rot) {
        Ok(r) => (r, None),
        Err(e) => match best_or_fail(e) {
            (Some(BestIterate::Rotation(r)), f) => (r, Some(f)),
            (_, f) => return Err(f),
        },
    };
    let mut lambda = res.rotated_loadings.as_matrix().clone();
    let mut phi = res.factor_cov.as_matrix().clone();
    let mut doc = document("rotate");
    doc.insert("n_obs".into(), json!(d.sample.n_obs()));
    doc.insert("variables".into(), json!(d.names));
    doc.insert("factors".into(), json!(factor_names(k)));
    doc.insert("criterion".into(), json!(criterion_label(rot)));
    let mut notes = String::new();
    if let Some(path) = align_to {
        let target = load_loading_table(path, d.names.len(), k)?;
        let t = align_matrix(&lambda, &target)?;
        lambda = t.apply(&lambda);
        phi = t.apply_factor_cov(&phi);
        doc.insert(
            "alignment".into(),
            json!({
                "permutation": t.permutation,
                "signs": t.signs,
                "aligned_distance": num(t.aligned_distance),
            }),
        );
        notes.push_str(&format!(
            "aligned to {}: distance {}\n",
            path.display(),
            fixed(t.aligned_distance)
        ));
    }
    doc.insert("loadings".into(), matrix(&lambda));
    doc.insert("factor_correlations".into(), matrix(&phi));
    doc.insert("uniqueness".into(), vector(est.uniqueness.as_vector()));
    doc.insert("objective".into(), num(res.objective));
    if let Some(q) = res.lp_objective {
        doc.insert("lp_objective".into(), num(q));
    }
    doc.insert("iterations".into(), json!(res.iterations));
    doc.insert("converged".into(), json!(res.converged));
    doc.insert("projected_gradient_norm".into(), num(res.projected_gradient_norm));
    if let (Some((path, n)), Some(p)) = (contour, rot.p) {
        let grid = contour_scan_2x2(&res.rotated_loadings, p, n)?;
        write_contour(path, &grid)?;
        let mut c = contour_summary(&grid);
        c["file"] = json!(path.display().to_string());
        doc.insert("contour".into(), c);
        notes.push_str(&contour_text(&grid));
    }
    let fnames = factor_names(k);
    let text = format!(
        "Rotated loadings, {} (N = {})\n\n{}\nFactor correlations\n\n{}\nobjective {}  iterations {}  converged {}\n{notes}",
        criterion_label(rot),
        d.sample.n_obs(),
        matrix_table(&d.names, &fnames, &lambda),
        matrix_table(&fnames, &fnames, &phi),
        format_number(res.objective),
        res.iterations,
        res.converged
    );
    write_loadings(out.loadings_csv.as_deref(), &d.names, &lambda)?;
    finish(doc, text, out, pending)
}

fn lasso_json(r: &LassoResult) -> Value {
    let l = r.params.loadings.as_matrix();
    json!({
        "gamma": r.gamma,
        "loadings": matrix(l),
        "factor_correlations": matrix(r.params.factor_cov.as_matrix()),
        "uniqueness": vector(r.params.uniqueness.as_vector()),
        "objective": num(r.objective),
        "discrepancy": num(r.discrepancy),
        "penalty": num(r.penalty_part),
        "nonzero": l.iter().filter(|v| **v != 0.0).count(),
        "iterations": r.iterations,
        "converged": r.converged,
    })
}

pub fn lasso(input: &InputArgs, gammas: &[f64], tol: f64, max_iter: usize, out: &OutputArgs) -> Result<(), Failure> {
    let d = load(input)?;
    let k = n_factors(input, d.names.len())?;
    let opts = LassoOptions {
        tol,
        max_iter,
        ..LassoOptions::with_gamma(gammas[0])
    };
    let mut sorted = gammas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    let results = if sorted.len() == 1 {
        vec![fit_lasso(&d.sample, k, &opts)]
    } else {
        lasso_path(&d.sample, k, &sorted, &opts)?
    };
    let mut pending = None;
    let mut fits = Vec::new();
    let mut text = String::new();
    let mut csv_rows: Vec<(f64, DMatrix<f64>)> = Vec::new();
    let fnames = factor_names(k);
    for (gamma, res) in sorted.iter().zip(results) {
        let r = match res {
            Ok(r) => r,
            Err(e) => match best_or_fail(e) {
                (Some(BestIterate::Lasso(r)), f) => {
                    pending.get_or_insert(f);
                    r
                }
                (_, f) => {
                    fits.push(json!({ "gamma": gamma, "error": f.message }));
                    text.push_str(&format!("gamma {gamma}: {}\n\n", f.message));
                    pending.get_or_insert(f);
                    continue;
                }
            },
        };
        fits.push(lasso_json(&r));
        text.push_str(&format!(
            "LASSO gamma = {gamma} (objective {}, iterations {}, converged {})\n\n{}\n",
            format_number(r.objective),
            r.iterations,
            r.converged,
            matrix_table(&d.names, &fnames, r.params.loadings.as_matrix())
        ));
        csv_rows.push((*gamma, r.params.loadings.as_matrix().clone()));
    }
    let mut doc = document("lasso");
    doc.insert("n_obs".into(), json!(d.sample.n_obs()));
    doc.insert("variables".into(), json!(d.names));
    doc.insert("factors".into(), json!(fnames));
    doc.insert("fits".into(), Value::Array(fits));
    if let Some(p) = out.loadings_csv.as_deref() {
        write_lasso_csv(p, &d.names, &fnames, &csv_rows)?;
    }
    finish(doc, text, out, pending)
}

fn write_lasso_csv(
    path: &Path,
    names: &[String],
    fnames: &[String],
    rows: &[(f64, DMatrix<f64>)],
) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::input(format!("cannot write {}: {e}", path.display()));
    let mut f = File::create(path).map_err(io)?;
    writeln!(f, "# schema_version={SCHEMA_VERSION}").map_err(io)?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["gamma".to_string(), "variable".to_string()];
    header.extend(fnames.iter().cloned());
    let err = |e: csv::Error| Failure::input(format!("cannot write {}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    for (gamma, m) in rows {
        for (r, name) in names.iter().enumerate() {
            let mut rec = vec![format_number(*gamma), name.clone()];
            rec.extend(m.row(r).iter().map(|v| format_number(*v)));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(io)
}

fn threshold_grid(g: &GridArgs) -> Result<ThresholdGrid, Failure> {
    Ok(if g.thresholds.is_empty() {
        ThresholdGrid::linspace(g.grid_lo, g.grid_hi, g.grid_n)?
    } else {
        ThresholdGrid::new(g.thresholds.clone())?
    })
}

fn pattern_json(p: &SignPattern) -> Value {
    Value::Array(
        p.as_matrix()
            .row_iter()
            .map(|r| Value::Array(r.iter().map(|&v| json!(v)).collect()))
            .collect(),
    )
}

fn skip_text(s: &Option<SkipReason>) -> String {
    match s {
        None => "ok".into(),
        Some(SkipReason::VacuousColumn { columns }) => format!("empty column {columns:?}"),
        Some(SkipReason::NotIdentified { condition }) => format!("not identified ({condition:.1e})"),
        Some(SkipReason::NotConverged) => "not converged".into(),
        Some(SkipReason::FitFailed { message }) => format!("failed: {message}"),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn select(
    input: &InputArgs,
    efa: &EfaArgs,
    rot: &RotationArgs,
    grid: &GridArgs,
    cfa: &CfaArgs,
    alpha: Option<f64>,
    intervals_csv: Option<&Path>,
    out: &OutputArgs,
) -> Result<(), Failure> {
    let d = load(input)?;
    let k = n_factors(input, d.names.len())?;
    let grid = threshold_grid(grid)?;
    if let Some(a) = alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(Failure::input(format!("--alpha must lie in (0, 1), got {a}")));
        }
    }
    let est = initial(&d.sample, k, efa)?;
    let res = run_rotation(&est.loadings_a, rot)?;
    let opts = cfa_options(cfa);
    let sel = select_model(&d.sample, &res, &grid, &opts)?;
    let intervals = match alpha {
        Some(a) => Some(post_selection_intervals(&d.sample, &sel.selected_pattern, a, &opts)?),
        None => None,
    };
    let fnames = factor_names(k);
    let refit = &sel.refit;
    let lambda = refit.params.loadings.as_matrix();
    let phi = refit.params.factor_cov.as_matrix();

    let mut rows = Vec::new();
    let per: Vec<Value> = sel
        .per_threshold
        .iter()
        .map(|o| {
            rows.push(vec![
                format!("{:.4}", o.c),
                o.pattern.n_nonzero().to_string(),
                o.bic.map_or("-".into(), |b| format!("{b:.3}")),
                if o.c == sel.selected_threshold {
                    "<".into()
                } else {
                    String::new()
                },
                skip_text(&o.skipped),
            ]);
            json!({
                "threshold": o.c,
                "nonzero": o.pattern.n_nonzero(),
                "bic": o.bic.map(num),
                "identified": o.identified,
                "skipped": o.skipped,
            })
        })
        .collect();

    let mut doc = document("select");
    doc.insert("n_obs".into(), json!(d.sample.n_obs()));
    doc.insert("variables".into(), json!(d.names));
    doc.insert("factors".into(), json!(fnames));
    doc.insert(
        "rotation".into(),
        json!({
            "criterion": criterion_label(rot),
            "objective": num(res.objective),
            "iterations": res.iterations,
            "converged": res.converged,
            "loadings": matrix(res.rotated_loadings.as_matrix()),
        }),
    );
    doc.insert("per_threshold".into(), Value::Array(per));
    doc.insert("selected_threshold".into(), json!(sel.selected_threshold));
    doc.insert("selected_pattern".into(), pattern_json(&sel.selected_pattern));
    doc.insert(
        "refit".into(),
        json!({
            "loadings": matrix(lambda),
            "factor_correlations": matrix(phi),
            "uniqueness": vector(refit.params.uniqueness.as_vector()),
            "loading_std_errors": refit.loading_std_errors().as_ref().map(matrix),
            "bic": num(refit.bic),
            "loglik": num(refit.loglik),
            "discrepancy": num(refit.discrepancy),
            "free_parameters": refit.n_free_params,
        }),
    );
    let mut text = format!(
        "Threshold selection, {} rotation (N = {})\n\n{}\nselected threshold {}\n\n",
        criterion_label(rot),
        d.sample.n_obs(),
        text_table(
            &[
                "threshold".into(),
                "nonzero".into(),
                "BIC".into(),
                String::new(),
                "status".into()
            ],
            &rows
        ),
        sel.selected_threshold
    );
    match (&intervals, alpha) {
        (Some(ci), Some(a)) => {
            doc.insert("intervals".into(), json!({ "alpha": a, "bounds": interval_json(ci) }));
            text.push_str(&format!(
                "Refit loadings with {}% post-selection intervals (* excludes zero)\n\n{}\n",
                format_number(100.0 * (1.0 - a)),
                interval_table(&d.names, &fnames, lambda, ci)
            ));
        }
        _ => text.push_str(&format!(
            "Refit loadings\n\n{}\n",
            matrix_table(&d.names, &fnames, lambda)
        )),
    }
    text.push_str(&format!(
        "Factor correlations\n\n{}",
        matrix_table(&fnames, &fnames, phi)
    ));
    write_loadings(out.loadings_csv.as_deref(), &d.names, lambda)?;
    if let (Some(p), Some(ci)) = (intervals_csv, &intervals) {
        write_interval_csv(p, &d.names, &fnames, lambda, ci)?;
    }
    finish(doc, text, out, None)
}

fn read_pattern(path: &Path, j: usize) -> Result<SignPattern, Failure> {
    let t = read_table_file(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if t.values.nrows() != j {
        return Err(Failure::input(format!(
            "{}: pattern has {} rows but the data has {j} variables",
            path.display(),
            t.values.nrows()
        )));
    }
    if t.values.iter().any(|v| ![-1.0, 0.0, 1.0].contains(v)) {
        return Err(Failure::input(format!(
            "{}: pattern entries must be -1, 0 or 1",
            path.display()
        )));
    }
    Ok(SignPattern::new(t.values.map(|v| v as i8))?)
}

pub fn ci(
    input: &InputArgs,
    pattern: &Path,
    cfa: &CfaArgs,
    alpha: f64,
    intervals_csv: Option<&Path>,
    out: &OutputArgs,
) -> Result<(), Failure> {
    let d = load(input)?;
    let pattern = read_pattern(pattern, d.names.len())?;
    let k = pattern.n_factors();
    if input.factors.is_some_and(|f| f != k) {
        return Err(Failure::input(format!(
            "--factors disagrees with the pattern's {k} columns"
        )));
    }
    let opts = cfa_options(cfa);
    let fit = fit_cfa(&d.sample, &CfaSpec::new(pattern.clone()), &opts)?;
    let ci: IntervalMatrix = post_selection_intervals(&d.sample, &pattern, alpha, &opts)?;
    let fnames = factor_names(k);
    let lambda = fit.params.loadings.as_matrix();
    let mut doc = document("ci");
    doc.insert("n_obs".into(), json!(d.sample.n_obs()));
    doc.insert("variables".into(), json!(d.names));
    doc.insert("factors".into(), json!(fnames));
    doc.insert("alpha".into(), json!(alpha));
    doc.insert("pattern".into(), pattern_json(&pattern));
    doc.insert("loadings".into(), matrix(lambda));
    doc.insert("factor_correlations".into(), matrix(fit.params.factor_cov.as_matrix()));
    doc.insert("bic".into(), num(fit.bic));
    doc.insert("intervals".into(), interval_json(&ci));
    let text = format!(
        "CFA estimates with {}% post-selection intervals (* excludes zero)\n\n{}",
        format_number(100.0 * (1.0 - alpha)),
        interval_table(&d.names, &fnames, lambda, &ci)
    );
    write_loadings(out.loadings_csv.as_deref(), &d.names, lambda)?;
    if let Some(p) = intervals_csv {
        write_interval_csv(p, &d.names, &fnames, lambda, &ci)?;
    }
    finish(doc, text, out, None)
}

/// Flag values of `simulate`, before validation.
pub struct SimulateRequest {
    pub fixture: String,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub p_values: Vec<f64>,
    pub gammas: Vec<f64>,
    pub smooth_criteria: Vec<String>,
    pub thresholds: Vec<f64>,
    pub select: bool,
    pub intervals: bool,
    pub alpha: f64,
    pub epsilon: f64,
    pub random_starts: usize,
}

/// Parses a snake_case enum name through its serde representation.
fn parse_names<T: serde::de::DeserializeOwned>(flag: &str, names: &[String]) -> Result<Vec<T>, Failure> {
    names
        .iter()
        .map(|n| serde_json::from_value(json!(n)).map_err(|_| Failure::input(format!("--{flag}: unknown value {n:?}"))))
        .collect()
}

pub fn simulate(req: SimulateRequest, jobs: usize, out_dir: &Path, format: Format) -> Result<(), Failure> {
    let spec = SimulationSpec {
        fixture: req.fixture,
        sample_sizes: req.sample_sizes,
        n_replications: req.replications,
        seed: req.seed,
        methods: parse_names("methods", &req.methods)?,
        p_values: req.p_values,
        gammas: req.gammas,
        smooth_criteria: parse_names("smooth-criteria", &req.smooth_criteria)?,
        thresholds: req.thresholds,
        select: req.select,
        intervals: req.intervals,
        alpha: req.alpha,
        epsilon: req.epsilon,
        random_starts: req.random_starts,
    };
    let result = run_simulation(&spec, jobs)?;
    let files = write_outputs(&result, out_dir)?;
    let rate = result.failure_rate();
    let mut doc = document("simulate");
    doc.insert("seed".into(), json!(spec.seed));
    doc.insert("fixture".into(), json!(spec.fixture));
    doc.insert(
        "files".into(),
        json!(files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>()),
    );
    doc.insert("failure_rate".into(), json!(rate));
    let mut rows = Vec::new();
    let summary: Vec<Value> = result
        .summary
        .iter()
        .map(|s| {
            rows.push(vec![
                s.method.label(),
                s.n_obs.to_string(),
                format!("{}/{}", s.replications - s.failed, s.replications),
                format!("{:.5}", s.mse),
                fixed(s.auc),
                fixed(s.tr),
                fixed(s.tpr),
                fixed(s.tnr),
            ]);
            json!({
                "method": s.method.label(),
                "options_hash": spec.options_hash(&s.method),
                "n": s.n_obs,
                "replications": s.replications,
                "failed": s.failed,
                "mse": num(s.mse),
                "mse_refit": num(s.mse_refit),
                "auc": num(s.auc),
                "tr": num(s.tr),
                "tpr": num(s.tpr),
                "tnr": num(s.tnr),
            })
        })
        .collect();
    doc.insert("summary".into(), Value::Array(summary));
    let text = format!(
        "{}\nfailure rate {:.3}; tables written to {}\n",
        text_table(
            &["method", "N", "ok", "MSE", "AUC", "TR", "TPR", "TNR"].map(String::from),
            &rows
        ),
        rate,
        out_dir.display()
    );
    match format {
        Format::Json => emit(&json_text(doc), None)?,
        Format::Text => emit(&text, None)?,
    }
    if rate > MAX_FAILURE_RATE {
        return Err(Failure {
            code: EXIT_NOT_CONVERGED,
            message: format!("{:.1}% of replications failed", 100.0 * rate),
        });
    }
    Ok(())
}

pub fn contour(
    fixture: Option<&str>,
    loadings: Option<&Path>,
    p: f64,
    grid: usize,
    grid_csv: &Path,
    output: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let lambda = match (fixture, loadings) {
        (Some(name), _) => by_name(name)?.loadings().clone(),
        (None, Some(path)) => {
            read_table_file(path)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
                .values
        }
        (None, None) => return Err(Failure::input("give --fixture or --loadings")),
    };
    let g = contour_scan_2x2(&LoadingMatrix::new(lambda)?, p, grid)?;
    write_contour(grid_csv, &g)?;
    let mut doc = document("contour");
    doc.insert("p".into(), json!(p));
    doc.insert("file".into(), json!(grid_csv.display().to_string()));
    if let Value::Object(m) = contour_summary(&g) {
        doc.extend(m);
    }
    match format {
        Format::Json => emit(&json_text(doc), output),
        Format::Text => emit(&contour_text(&g), output),
    }
}
