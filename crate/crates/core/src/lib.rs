//! Biophysical PPG pulse simulation and hybrid amortized inference.

// `!(a < b)` is how NaN gets rejected alongside out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod domain;
pub mod error;
pub mod forward;
pub mod hemodynamics;
pub mod inference;
pub mod optics;
pub mod rng;
pub mod sampling;
pub mod sensor;
pub mod surrogate;
pub mod transport;

pub use error::{PpgError, Result};
