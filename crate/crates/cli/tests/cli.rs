use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lpfa::model::{implied_covariance, FactorCovariance, FactorModelParams, LoadingMatrix, Uniqueness};
use lpfa::simulation::{draw_normal, replication_rng};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use tempfile::TempDir;

fn lpfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpfa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = lpfa(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn ok_text(args: &[&str]) -> String {
    let out = lpfa(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    lpfa(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn model(lambda: DMatrix<f64>, phi: DMatrix<f64>) -> FactorModelParams {
    let omega = DVector::from_fn(lambda.nrows(), |r, _| {
        1.0 - (lambda.row(r) * &phi * lambda.row(r).transpose())[(0, 0)]
    });
    FactorModelParams::new(
        LoadingMatrix::new(lambda).unwrap(),
        FactorCovariance::new(phi).unwrap(),
        Uniqueness::new(omega).unwrap(),
    )
    .unwrap()
}

fn six_by_two() -> FactorModelParams {
    let lambda = DMatrix::from_fn(6, 2, |r, c| if r / 3 == c { 0.8 } else { 0.0 });
    model(lambda, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]))
}

fn names(j: usize) -> Vec<String> {
    (1..=j).map(|i| format!("x{i}")).collect()
}

fn write_raw(path: &Path, x: &DMatrix<f64>) {
    let mut text = names(x.ncols()).join(",");
    text.push('\n');
    for r in x.row_iter() {
        text.push_str(&r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn write_square(path: &Path, m: &DMatrix<f64>) {
    let mut text = names(m.ncols()).join(",");
    text.push('\n');
    for r in m.row_iter() {
        text.push_str(&r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn sample_data(params: &FactorModelParams, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = replication_rng(seed, n, 0);
    draw_normal(&implied_covariance(params), n, &mut rng).unwrap()
}

fn raw_file(dir: &TempDir, name: &str, params: &FactorModelParams, n: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    write_raw(&path, &sample_data(params, n, seed));
    path
}

fn matrix_of(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| {
            r.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn input_errors_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 200, 1);
    let cov = dir.path().join("cov.csv");
    write_square(&cov, &DMatrix::identity(6, 6));
    assert_eq!(
        code(&["fit", "--input", s(&dir.path().join("missing.csv")), "--factors", "2"]),
        2
    );
    assert_eq!(code(&["fit", "--input", s(&x), "--factors", "0"]), 2);
    assert_eq!(code(&["fit", "--input", s(&x)]), 2);
    assert_eq!(code(&["fit", "--input", s(&cov), "--covariance", "--factors", "2"]), 2);
    assert_eq!(code(&["rotate", "--input", s(&x), "--factors", "2", "--p", "1.5"]), 2);
    assert_eq!(code(&["rotate", "--input", s(&x), "--factors", "2"]), 2);
    assert_eq!(code(&["simulate", "--fixture", "simple-6x2", "--replications", "1"]), 2);
    assert_eq!(code(&["nonsense"]), 2);
    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "a,b,c\n1,2,3\n4,5\n").unwrap();
    assert_eq!(code(&["fit", "--input", s(&ragged), "--factors", "1"]), 2);
}

#[test]
fn cov_input_without_n_obs_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cov = dir.path().join("cov.csv");
    write_square(&cov, &DMatrix::identity(4, 4));
    let out = lpfa(&["fit", "--input", s(&cov), "--covariance", "--factors", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n-obs"));
}

#[test]
fn rank_deficient_data_exits_with_status_3() {
    let dir = tempfile::tempdir().unwrap();
    // two observations: the centred covariance has rank one
    let x = dir.path().join("x.csv");
    write_raw(
        &x,
        &DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.5, -1.0, -1.0, 0.0, 1.5, 2.0]),
    );
    assert_eq!(code(&["fit", "--input", s(&x), "--factors", "2"]), 3);
}

#[test]
fn exhausted_iterations_exit_with_status_4_and_still_report() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 300, 2);
    let out = lpfa(&["fit", "--input", s(&x), "--factors", "2", "--efa-max-iter", "1"]);
    assert_eq!(out.status.code(), Some(4));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["converged"], Value::Bool(false));
}

#[test]
fn empty_threshold_grid_exits_with_status_5() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 300, 3);
    assert_eq!(
        code(&[
            "select",
            "--input",
            s(&x),
            "--factors",
            "2",
            "--p",
            "1",
            "--thresholds",
            "0.95"
        ]),
        5
    );
}

#[test]
fn covariance_and_raw_inputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_data(&six_by_two(), 400, 4);
    let raw = dir.path().join("x.csv");
    write_raw(&raw, &data);
    // re-read the file so both paths start from identical numbers
    let reread = lpfa::data::read_raw(std::fs::File::open(&raw).unwrap()).unwrap();
    let s_mat = reread.sample_covariance(false).unwrap();
    let cov = dir.path().join("cov.csv");
    write_square(&cov, s_mat.as_matrix());
    let args = |input: &str, extra: &[&str]| {
        let mut v = vec!["select", "--input", input, "--factors", "2", "--p", "1"];
        v.extend_from_slice(extra);
        v.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let a = args(s(&raw), &[]);
    let b = args(s(&cov), &["--covariance", "--n-obs", "400"]);
    let ra = ok_json(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let rb = ok_json(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(ra["selected_pattern"], rb["selected_pattern"]);
    assert_eq!(ra["selected_threshold"], rb["selected_threshold"]);
    let gap = max_gap(
        &matrix_of(&ra["refit"]["loadings"]),
        &matrix_of(&rb["refit"]["loadings"]),
    );
    assert!(gap < 1e-8, "refit loadings differ by {gap}");
    let bic = (ra["refit"]["bic"].as_f64().unwrap() - rb["refit"]["bic"].as_f64().unwrap()).abs();
    assert!(bic < 1e-6, "BIC differs by {bic}");
}

#[test]
fn bessel_flag_rescales_the_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 50, 5);
    let plain = ok_json(&["fit", "--input", s(&x), "--factors", "2"]);
    let bessel = ok_json(&["fit", "--input", s(&x), "--factors", "2", "--bessel"]);
    // uniquenesses scale with S, so the ratio is N / (N - 1)
    let u0: Vec<f64> = plain["uniqueness"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let u1: Vec<f64> = bessel["uniqueness"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (a, b) in u0.iter().zip(&u1) {
        assert!((b / a - 50.0 / 49.0).abs() < 1e-5, "{a} {b}");
    }
}

#[test]
fn config_supplies_defaults_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 300, 6);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        format!(
            "[rotate]\ninput = {:?}\nfactors = 2\np = 0.5\nrandom_starts = 2\n",
            s(&x)
        ),
    )
    .unwrap();
    let from_file = ok_json(&["rotate", "--config", s(&cfg)]);
    assert_eq!(from_file["criterion"], "lp(p=0.5)", "{from_file}");
    let overridden = ok_json(&["rotate", "--config", s(&cfg), "--p", "1"]);
    assert_eq!(overridden["criterion"], "lp(p=1)");
    let direct = ok_json(&["rotate", "--input", s(&x), "--factors", "2", "--p", "1"]);
    assert_eq!(overridden["loadings"], direct["loadings"]);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[rotate]\nno_such_flag = 1\n").unwrap();
    assert_eq!(code(&["rotate", "--config", s(&bad)]), 2);
}

#[test]
fn unidentified_rows_render_as_unbounded_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 500, 7);
    // the second factor keeps only two indicators: freeing either leaves one
    let pattern = dir.path().join("pattern.csv");
    std::fs::write(
        &pattern,
        "variable,F1,F2\nx1,1,0\nx2,1,0\nx3,1,0\nx4,1,0\nx5,0,1\nx6,0,1\n",
    )
    .unwrap();
    let text = ok_text(&["ci", "--input", s(&x), "--pattern", s(&pattern), "--format", "text"]);
    let row = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap().to_string();
    assert_eq!(row("x5").matches("(-inf, inf)").count(), 2, "{text}");
    assert_eq!(row("x6").matches("(-inf, inf)").count(), 2, "{text}");
    assert!(!row("x1").contains("inf"), "{text}");
    assert!(row("x1").contains('*'), "{text}");

    let doc = ok_json(&["ci", "--input", s(&x), "--pattern", s(&pattern)]);
    let bounds = &doc["intervals"];
    assert!(bounds.to_string().contains("\"-inf\""), "{doc}");
}

fn interval_widths(doc: &Value) -> Vec<f64> {
    let b = &doc["intervals"]["bounds"];
    let lower = matrix_of(&b["lower"]);
    let upper = matrix_of(&b["upper"]);
    lower
        .iter()
        .flatten()
        .zip(upper.iter().flatten())
        .map(|(l, u)| u - l)
        .collect()
}

#[test]
fn wider_alpha_gives_narrower_intervals_and_the_same_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 500, 8);
    let base = ["select", "--input", s(&x), "--factors", "2", "--p", "1"];
    let mut narrow = base.to_vec();
    narrow.extend_from_slice(&["--alpha", "0.5"]);
    let a = ok_json(&base);
    let b = ok_json(&narrow);
    assert_eq!(a["refit"]["loadings"], b["refit"]["loadings"]);
    let wa = interval_widths(&a);
    let wb = interval_widths(&b);
    assert!(!wa.is_empty() && wa.len() == wb.len());
    for (x, y) in wa.iter().zip(&wb) {
        assert!(y < x, "alpha 0.5 width {y} not below alpha 0.05 width {x}");
    }
}

#[test]
fn interval_csv_has_schema_header_and_one_row_per_loading() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 300, 9);
    let csv = dir.path().join("ci.csv");
    ok_json(&[
        "select",
        "--input",
        s(&x),
        "--factors",
        "2",
        "--p",
        "1",
        "--intervals-csv",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    assert_eq!(lines.next(), Some("variable,factor,estimate,lower,upper,significant"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn lasso_reports_every_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let x = raw_file(&dir, "x.csv", &six_by_two(), 300, 10);
    let doc = ok_json(&["lasso", "--input", s(&x), "--factors", "2", "--gamma", "0.01,0.2"]);
    let gammas: Vec<f64> = doc["fits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["gamma"].as_f64().unwrap())
        .collect();
    assert_eq!(gammas, vec![0.2, 0.01]);
}

#[test]
fn contour_writes_a_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    let doc = ok_json(&[
        "contour",
        "--fixture",
        "example-7x2",
        "--p",
        "0.5",
        "--grid",
        "36",
        "--grid-csv",
        s(&grid),
    ]);
    assert!(doc["minimum"]["cells_from_identity"].as_f64().unwrap() <= 1.0);
    let text = std::fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("# schema_version=1"));
    let data_rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(data_rows, 36 * 36);
}

/// Fifty items on five correlated factors, ten per factor, every fifth item
/// with a secondary loading: the shape of a Big Five inventory.
fn big_five() -> FactorModelParams {
    let lambda = DMatrix::from_fn(50, 5, |r, c| {
        let home = r / 10;
        if c == home {
            0.65
        } else if r % 5 == 4 && c == (home + 1) % 5 {
            0.3
        } else {
            0.0
        }
    });
    let phi = DMatrix::from_fn(5, 5, |a, b| {
        if a == b {
            1.0
        } else {
            0.15 + 0.05 * ((a + b) % 3) as f64
        }
    });
    model(lambda, phi)
}

#[test]
fn big_five_style_data_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let truth = big_five();
    let x = raw_file(&dir, "bigfive.csv", &truth, 609, 11);
    let loadings_csv = dir.path().join("loadings.csv");
    let fit = ok_json(&[
        "fit",
        "--input",
        s(&x),
        "--factors",
        "5",
        "--loadings-csv",
        s(&loadings_csv),
    ]);
    assert_eq!(matrix_of(&fit["loadings"]).len(), 50);
    assert!(matrix_of(&fit["loadings"]).iter().all(|r| r.len() == 5));
    let table = std::fs::read_to_string(&loadings_csv).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 51);

    let half = ok_json(&[
        "rotate",
        "--input",
        s(&x),
        "--factors",
        "5",
        "--p",
        "0.5",
        "--random-starts",
        "3",
    ]);
    let one = ok_json(&["rotate", "--input", s(&x), "--factors", "5", "--p", "1"]);
    let phi_half = matrix_of(&half["factor_correlations"]);
    let phi_one = matrix_of(&one["factor_correlations"]);
    assert_eq!(phi_half.len(), 5);

    // align the two solutions before comparing correlation signs
    let to_matrix = |m: &Vec<Vec<f64>>| DMatrix::from_fn(m.len(), m[0].len(), |r, c| m[r][c]);
    let l_half = to_matrix(&matrix_of(&half["loadings"]));
    let l_one = to_matrix(&matrix_of(&one["loadings"]));
    let t = lpfa::metrics::align_matrix(&l_half, &l_one).unwrap();
    let phi_aligned = t.apply_factor_cov(&to_matrix(&phi_half));
    for a in 0..5 {
        for b in 0..5 {
            let (p, q) = (phi_aligned[(a, b)], phi_one[a][b]);
            if p.abs() > 0.05 && q.abs() > 0.05 {
                assert_eq!(p.signum(), q.signum(), "Φ[{a},{b}]: {p} vs {q}");
            }
        }
    }

    let sel = ok_json(&["select", "--input", s(&x), "--factors", "5", "--p", "1"]);
    let pattern = matrix_of(&sel["selected_pattern"]);
    assert_eq!(pattern.len(), 50);
    let text = ok_text(&[
        "select",
        "--input",
        s(&x),
        "--factors",
        "5",
        "--p",
        "1",
        "--format",
        "text",
    ]);
    assert!(text.contains('*'));
}

#[test]
fn simulate_writes_all_tables_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = lpfa(&[
            "simulate",
            "--seed",
            "21",
            "--fixture",
            "simple-6x2",
            "--sample-sizes",
            "200",
            "--replications",
            "3",
            "--methods",
            "lp_rotation,smooth_rotation,lasso",
            "--p-values",
            "1",
            "--smooth-criteria",
            "quartimin",
            "--gammas",
            "0.05",
            "--out-dir",
            s(&out),
        ]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    for file in ["summary.csv", "replications.csv", "roc.csv", "gamma_path.csv"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file}");
        assert!(x.starts_with(b"# schema_version=1"), "{file}");
    }
    let reps = std::fs::read_to_string(a.join("replications.csv")).unwrap();
    let header = reps.lines().nth(1).unwrap();
    for col in ["seed", "rep", "method", "options_hash"] {
        assert!(header.split(',').any(|h| h == col), "{header}");
    }
    assert_eq!(reps.lines().count(), 2 + 3 * 3);
}
