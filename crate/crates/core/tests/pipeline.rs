use lpfa::cfa::{fit_cfa, CfaOptions, CfaSpec};
use lpfa::efa::{fit_efa, OptimOptions};
use lpfa::fixtures::{by_name, study1_15x3, NAMES};
use lpfa::metrics::align_matrix;
use lpfa::model::{implied_covariance, ml_discrepancy};
use lpfa::rotation::{rotate_irgp, IrgpOptions};
use lpfa::selection::{post_selection_intervals, select_model, ThresholdGrid};
use lpfa::simulation::{run_simulation, MethodFamily, SimulationSpec};

#[test]
fn fixture_covariances_are_positive_definite_and_simple_rows_standardised() {
    for name in NAMES {
        let f = by_name(name).unwrap();
        let sigma = implied_covariance(&f.params);
        assert!(sigma.clone().cholesky().is_some(), "{name}");
        let lambda = f.loadings();
        let omega = f.params.uniqueness.as_vector();
        for r in 0..lambda.nrows() {
            let common = sigma[(r, r)] - omega[r];
            let expect = (lambda.row(r) * f.params.factor_cov.as_matrix() * lambda.row(r).transpose())[(0, 0)];
            assert!((common - expect).abs() < 1e-12, "{name} row {r}");
        }
    }
    for name in ["study1-15x3", "study1-30x5", "simple-6x2"] {
        let f = by_name(name).unwrap();
        let sigma = implied_covariance(&f.params);
        let lambda = f.loadings();
        for r in 0..lambda.nrows() {
            if lambda.row(r).iter().filter(|&&x| x != 0.0).count() == 1 {
                assert!((sigma[(r, r)] - 1.0).abs() < 1e-12, "{name} row {r}: {}", sigma[(r, r)]);
            }
        }
    }
    let study2 = implied_covariance(&by_name("study2-18x3").unwrap().params);
    assert!(study2.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-12));
}

#[test]
fn population_pipeline_recovers_the_study_one_fixture() {
    let fixture = study1_15x3();
    let truth = fixture.loadings();
    let sample = fixture.population(1600).unwrap();

    let efa = fit_efa(&sample, 3, &OptimOptions::default()).unwrap();
    // the EFA solution reproduces the population covariance
    assert!(efa.discrepancy_value - ml_discrepancy(&fixture.params, &sample).unwrap() < 1e-8);

    let rot = rotate_irgp(&efa.loadings_a, 1.0, &IrgpOptions::default()).unwrap();
    let t = align_matrix(rot.rotated_loadings.as_matrix(), truth).unwrap();
    assert!(t.aligned_distance < 1e-2, "rotation distance {}", t.aligned_distance);

    let sel = select_model(&sample, &rot, &ThresholdGrid::default(), &CfaOptions::default()).unwrap();
    assert_eq!(t.apply_pattern(&sel.selected_pattern), fixture.pattern());
    let refit = t.apply(sel.refit.params.loadings.as_matrix());
    assert!((refit - truth).amax() < 1e-5);

    let ci = post_selection_intervals(&sample, &sel.selected_pattern, 0.05, &CfaOptions::default()).unwrap();
    let ci = ci.transform(&t);
    assert!(ci.covers(truth).iter().all(|&c| c));
}

#[test]
fn true_pattern_has_the_smallest_bic_at_the_population() {
    let fixture = study1_15x3();
    let sample = fixture.population(1600).unwrap();
    let opts = CfaOptions::default();
    let truth = fit_cfa(&sample, &CfaSpec::new(fixture.pattern()), &opts).unwrap();
    // dropping any true cross-loading must cost more than the saved parameter
    let m = fixture.pattern().as_matrix().clone();
    for r in 0..m.nrows() {
        let nonzero: Vec<usize> = (0..m.ncols()).filter(|&c| m[(r, c)] != 0).collect();
        if nonzero.len() < 2 {
            continue;
        }
        let mut reduced = m.clone();
        reduced[(r, nonzero[1])] = 0;
        let p = lpfa::cfa::SignPattern::new(reduced).unwrap();
        let fit = fit_cfa(&sample, &CfaSpec::new(p), &opts).unwrap();
        assert!(fit.bic > truth.bic, "row {r}: {} <= {}", fit.bic, truth.bic);
    }
}

#[test]
fn study_one_selection_recovers_the_pattern_in_most_replications() {
    let spec = SimulationSpec {
        fixture: "study1-15x3".into(),
        sample_sizes: vec![1600],
        n_replications: 100,
        seed: 17,
        methods: vec![MethodFamily::LpRotation],
        p_values: vec![1.0],
        ..SimulationSpec::default()
    };
    let out = run_simulation(&spec, 0).unwrap();
    let exact = out
        .records
        .iter()
        .filter(|r| matches!(&r.outcome, Ok(m) if m.tr == Some(1.0)))
        .count();
    assert!(
        exact as f64 >= 0.95 * 100.0,
        "{exact} of 100 replications recovered the pattern"
    );
}
