//! Continuous-time GRU-D classifiers for irregularly sampled multivariate
//! series with informative missingness.

// `!(x > 0.0)` checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod missingness;
pub mod models;
pub mod odesolver;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
