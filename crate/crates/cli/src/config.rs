//! Run configuration file: `[model]`, optional `[train]` and `[analyze]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unetmm::arch::{ModelConfig, SkipMode};
use unetmm::train::TrainConfig;
use unetmm::Shape;

use crate::Failure;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// `[N, C, H, W]`; defaults to one 256x256 image.
    pub input: Option<[usize; 4]>,
}

/// Scalar overrides from the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub skip_mode: Option<SkipMode>,
}

impl RunConfig {
    pub fn load(path: &Path, over: Overrides) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        if let Some(seed) = over.seed {
            cfg.train.seed = seed;
        }
        if let Some(mode) = over.skip_mode {
            cfg.model.skip_mode = mode;
        }
        cfg.model.validate().map_err(|e| Failure::usage(format!("{}: [model] {e}", path.display())))?;
        cfg.train.validate().map_err(|e| Failure::usage(format!("{}: [train] {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn analyze_input(&self) -> Result<Shape, Failure> {
        let [n, c, h, w] = self.analyze.input.unwrap_or([1, self.model.in_channels, 256, 256]);
        Shape::new(n, c, h, w).map_err(|e| Failure::usage(format!("[analyze] input: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
