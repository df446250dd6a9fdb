//! Neural posterior estimation, misspecification learning and scoring.

mod encoder;
mod features;
mod hai;
mod metrics;
mod npe;

pub use encoder::{EmbeddingConfig, Encoder, EncoderConfig};
pub use features::{raw_features, stack_pulses, FeatureNorm, DC_FLOOR};
pub use hai::{infer, learn_misspec, train_real_only, HaiConfig, HaiReport, MisspecModel};
pub use metrics::{evaluate, mape, pearson, DynamicScore, EvalReport, StaticScore};
pub use npe::{pretrain_npe, NpeConfig, NpeModel, NpeOutputs, NpeReport, OutputMap, Posterior};
