//! Lookup-table construction and the learned light-transport surrogate.

mod lut;
mod model;

pub use lut::{build_lut, lut_bounds, Design, Lut, LutBounds, LutConfig, LutRecord, PERTURBATION_SIGMAS};
pub use model::{
    train_surrogate, validation_groups, SurrogateConfig, SurrogateModel, SurrogateReport, FRACTION_FLOOR, MU_A_FLOOR,
};
