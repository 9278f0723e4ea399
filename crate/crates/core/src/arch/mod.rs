//! Model assembly: encoder, decoder, MSIAM, IEM and the skip-mode ablations.

mod config;
mod macs;
mod model;

pub use config::{ModelConfig, Reduction, SkipMode};
pub use macs::count_macs;
pub use model::{DecoderStage, EncoderStage, EnhancementHeader, ForwardOutput, Iem, Msiam, StageFeatures, UNet};
