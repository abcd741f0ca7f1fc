//! L^p component-loss oblique rotation for exploratory factor analysis,
//! with L^1-regularised estimation, hard-thresholding model selection by
//! BIC and post-selection confidence intervals.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfa;
pub mod data;
pub mod efa;
pub mod error;
pub mod fixtures;
pub mod lasso;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rotation;
pub mod selection;
pub mod simulation;

pub use error::{BestIterate, Error, Result};
