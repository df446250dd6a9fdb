//! Experiment orchestration for the ppgen simulator: configs, the artifact
//! store, staged pipeline runs and report emission.

// `!(a < b)` is how NaN gets rejected alongside out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod tables;

pub use config::{ExperimentConfig, Method, Profile};
pub use error::{CliError, Result};
pub use pipeline::{run_pipeline, RunManifest, RunStatus, Stage};
pub use store::Store;
