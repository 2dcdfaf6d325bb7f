//! Experiment runner for the crowdtemp pipeline: one TOML config drives
//! corpus generation, estimator and aggregator training, truth-inference
//! benchmarks, crowd labelling, few-shot adaptation and federated rounds.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod stages;
pub mod svg;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{CliError, Result, Stage};
pub use stages::{run_stage, Context};
