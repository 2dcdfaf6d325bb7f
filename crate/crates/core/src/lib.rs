//! Distributed phone-based ambient temperature measurement.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod crowdsim;
pub mod data;
pub mod error;
pub mod estimator;
pub mod fedagg;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod truthinf;

pub use error::{Error, Result};
