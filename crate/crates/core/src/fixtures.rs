//! Documented true-parameter fixtures for the simulation studies and tests.
//!
//! The first study's fixtures use main loadings 0.8, cross loadings 0.4 and
//! factor correlations 0.3. Every uniqueness is 0.36, so a simple row has
//! variance 1 and rows with cross loadings have variance above 1.
//!
//! The second study's fixture has uncorrelated factors, main loadings 0.6
//! and cross loadings ±0.4 with unit variances. For this matrix the L^0.5
//! criterion is minimised at the truth while the L^1 criterion is not.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::cfa::SignPattern;
use crate::error::{Error, Result};
use crate::model::{
    implied_covariance, FactorCovariance, FactorModelParams, LoadingMatrix, SampleCovariance, Uniqueness,
};

pub const MAIN: f64 = 0.8;
pub const CROSS: f64 = 0.4;
pub const FACTOR_CORR: f64 = 0.3;
pub const UNIQUENESS: f64 = 0.36;
pub const STUDY2_MAIN: f64 = 0.6;
pub const STUDY2_CROSS: f64 = 0.4;

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 5] = ["study1-15x3", "study1-30x5", "study2-18x3", "simple-6x2", "example-7x2"];

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub name: String,
    pub params: FactorModelParams,
}

impl Fixture {
    pub fn loadings(&self) -> &DMatrix<f64> {
        self.params.loadings.as_matrix()
    }

    pub fn pattern(&self) -> SignPattern {
        SignPattern::from_signs(self.loadings())
    }

    /// The model-implied covariance, treated as a sample of size `n_obs`.
    pub fn population(&self, n_obs: usize) -> Result<SampleCovariance> {
        SampleCovariance::new(implied_covariance(&self.params), n_obs)
    }
}

fn equicorrelated(k: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { r })
}

/// Builds a fixture from rows given as `(factor, loading)` lists.
fn from_rows(name: &str, k: usize, rows: &[Vec<(usize, f64)>]) -> Fixture {
    let mut lambda = DMatrix::zeros(rows.len(), k);
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            lambda[(r, c)] = v;
        }
    }
    let params = FactorModelParams::new(
        LoadingMatrix::new(lambda).expect("finite fixture"),
        FactorCovariance::new(equicorrelated(k, FACTOR_CORR)).expect("valid correlation"),
        Uniqueness::new(DVector::from_element(rows.len(), UNIQUENESS)).expect("positive uniqueness"),
    )
    .expect("consistent fixture");
    Fixture {
        name: name.into(),
        params,
    }
}

/// 15×3: nine simple rows (three per factor) and six rows loading on two
/// factors (two per factor pair).
pub fn study1_15x3() -> Fixture {
    let mut rows: Vec<Vec<(usize, f64)>> = (0..9).map(|r| vec![(r / 3, MAIN)]).collect();
    for f in 0..3 {
        for _ in 0..2 {
            rows.push(vec![(f, MAIN), ((f + 1) % 3, CROSS)]);
        }
    }
    from_rows("study1-15x3", 3, &rows)
}

/// 30×5: fifteen simple rows (three per factor), ten rows loading on two
/// factors and five rows loading on three.
pub fn study1_30x5() -> Fixture {
    let mut rows: Vec<Vec<(usize, f64)>> = (0..15).map(|r| vec![(r / 3, MAIN)]).collect();
    for step in [1, 2] {
        for f in 0..5 {
            rows.push(vec![(f, MAIN), ((f + step) % 5, CROSS)]);
        }
    }
    for f in 0..5 {
        rows.push(vec![(f, MAIN), ((f + 1) % 5, CROSS), ((f + 2) % 5, CROSS)]);
    }
    from_rows("study1-30x5", 5, &rows)
}

/// 18×3 with every row loading on two factors: for each ordered factor
/// pair (a, b), three rows with main loading on a and cross loading on b,
/// the third of them negative.
pub fn study2_18x3() -> Fixture {
    let mut lambda = DMatrix::zeros(18, 3);
    let mut r = 0;
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            for i in 0..3 {
                lambda[(r, a)] = STUDY2_MAIN;
                lambda[(r, b)] = if i == 2 { -STUDY2_CROSS } else { STUDY2_CROSS };
                r += 1;
            }
        }
    }
    let omega = 1.0 - STUDY2_MAIN * STUDY2_MAIN - STUDY2_CROSS * STUDY2_CROSS;
    let params = FactorModelParams::new(
        LoadingMatrix::new(lambda).expect("finite fixture"),
        FactorCovariance::identity(3),
        Uniqueness::new(DVector::from_element(18, omega)).expect("positive uniqueness"),
    )
    .expect("consistent fixture");
    Fixture {
        name: "study2-18x3".into(),
        params,
    }
}

/// 6×2 perfect simple structure, three rows per factor.
pub fn simple_6x2() -> Fixture {
    let rows: Vec<Vec<(usize, f64)>> = (0..6).map(|r| vec![(r / 3, MAIN)]).collect();
    from_rows("simple-6x2", 2, &rows)
}

/// The 7×2 loading matrix whose L^1 minimiser is not the truth while the
/// L^0.5 minimiser is, with uncorrelated factors.
pub fn example_7x2() -> Fixture {
    let lambda = DMatrix::from_row_slice(
        7,
        2,
        &[
            1.20, 0.0, 0.0, 0.27, 0.15, 0.0, 0.0, 1.04, 0.25, 0.15, 1.05, 1.29, 0.18, 0.11,
        ],
    );
    let params = FactorModelParams::new(
        LoadingMatrix::new(lambda).expect("finite fixture"),
        FactorCovariance::identity(2),
        Uniqueness::new(DVector::from_element(7, UNIQUENESS)).expect("positive uniqueness"),
    )
    .expect("consistent fixture");
    Fixture {
        name: "example-7x2".into(),
        params,
    }
}

pub fn by_name(name: &str) -> Result<Fixture> {
    match name {
        "study1-15x3" => Ok(study1_15x3()),
        "study1-30x5" => Ok(study1_30x5()),
        "study2-18x3" => Ok(study2_18x3()),
        "simple-6x2" => Ok(simple_6x2()),
        "example-7x2" => Ok(example_7x2()),
        _ => Err(Error::InvalidInput(format!(
            "unknown fixture {name:?}; expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

/// Random perfect simple structure: every factor gets at least two rows,
/// loadings have magnitude in [0.4, 1.0] with random signs.
pub fn random_perfect_simple<R: Rng>(j: usize, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 || j < 2 * k {
        return Err(Error::InvalidInput(format!(
            "need at least two rows per factor, got J={j}, K={k}"
        )));
    }
    let mut owner: Vec<usize> = (0..j)
        .map(|r| if r < 2 * k { r / 2 } else { rng.random_range(0..k) })
        .collect();
    // shuffle so the structure is not block ordered
    for i in (1..j).rev() {
        owner.swap(i, rng.random_range(0..=i));
    }
    let mut lambda = DMatrix::zeros(j, k);
    for (r, &c) in owner.iter().enumerate() {
        let mag: f64 = rng.random_range(0.4..=1.0);
        lambda[(r, c)] = if rng.random_bool(0.5) { mag } else { -mag };
    }
    Ok(lambda)
}
