//! Declarative model configuration and its TOML form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Which encoder features reach the decoder, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SkipMode {
    /// Plain U-Net skips at every stage.
    Full,
    /// No skips at all.
    None,
    /// A single skip from encoder stage `k` to decoder stage `k`.
    SingleAt(usize),
    /// Skips replaced by one aggregated map (MSIAM) expanded per stage (IEM).
    MsiamIem,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipMode::Full => f.write_str("full"),
            SkipMode::None => f.write_str("none"),
            SkipMode::SingleAt(k) => write!(f, "single:{k}"),
            SkipMode::MsiamIem => f.write_str("msiam-iem"),
        }
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SkipMode::Full),
            "none" => Ok(SkipMode::None),
            "msiam-iem" => Ok(SkipMode::MsiamIem),
            _ => s
                .strip_prefix("single:")
                .and_then(|k| k.parse().ok())
                .map(SkipMode::SingleAt)
                .ok_or_else(|| Error::config(format!("unknown skip mode `{s}` (full, none, single:K, msiam-iem)"))),
        }
    }
}

/// A positive rational channel-reduction ratio, written `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Reduction {
    pub num: usize,
    pub den: usize,
}

impl Reduction {
    pub const fn new(num: usize, den: usize) -> Self {
        Reduction { num, den }
    }

    /// `channels * num / den` if that is a positive integer.
    pub fn apply(&self, channels: usize) -> Option<usize> {
        let scaled = channels * self.num;
        (scaled.is_multiple_of(self.den) && scaled / self.den > 0).then(|| scaled / self.den)
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad reduction ratio `{s}`, expected e.g. `1/16`"));
        let (num, den) = match s.split_once('/') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Reduction { num, den })
    }
}

macro_rules! serde_via_str {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(SkipMode);
serde_via_str!(Reduction);

/// Model description.
///
/// Stages are 1-based. Encoder stage `n` has `base_width * 2^(n-1)` channels
/// at `1/2^(n-1)` resolution; stage `N` is the bottleneck. `blocks_per_stage`
/// lists the encoder stages `1..=N` followed by the decoder stages in
/// execution order `N-1..=1`, so it has `2N - 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub base_width: usize,
    #[serde(default = "defaults::in_channels")]
    pub in_channels: usize,
    pub blocks_per_stage: Vec<usize>,
    pub skip_mode: SkipMode,
    /// One ratio per skip stage `1..N-1`.
    pub msiam_reduction: Vec<Reduction>,
    /// Resolution level of the aggregated map, in `1..=N-1`.
    pub target_level: usize,
    #[serde(default = "defaults::iem_expand")]
    pub iem_expand: usize,
    #[serde(default = "defaults::separable_kernel")]
    pub separable_kernel: usize,
    #[serde(default = "defaults::accounting_bits")]
    pub accounting_bits: u32,
    #[serde(default = "defaults::yes")]
    pub global_residual: bool,
    #[serde(default = "defaults::yes")]
    pub conv_bias: bool,
}

mod defaults {
    pub fn in_channels() -> usize {
        3
    }
    pub fn iem_expand() -> usize {
        4
    }
    pub fn separable_kernel() -> usize {
        3
    }
    pub fn accounting_bits() -> u32 {
        8
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for ModelConfig {
    /// Five stages of width 32, reductions {1/16, 1/16, 1/16, 1/8}, aggregated
    /// at the coarsest skip level, 8-bit accounting.
    fn default() -> Self {
        ModelConfig {
            num_stages: 5,
            base_width: 32,
            in_channels: 3,
            blocks_per_stage: vec![1; 9],
            skip_mode: SkipMode::MsiamIem,
            msiam_reduction: vec![
                Reduction::new(1, 16),
                Reduction::new(1, 16),
                Reduction::new(1, 16),
                Reduction::new(1, 8),
            ],
            target_level: 4,
            iem_expand: 4,
            separable_kernel: 3,
            accounting_bits: 8,
            global_residual: true,
            conv_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn with_skip_mode(&self, skip_mode: SkipMode) -> Self {
        ModelConfig { skip_mode, ..self.clone() }
    }

    /// Desk-scale denoiser: 3 stages of width 8 on single-channel images,
    /// reductions {1/2, 1/2}, aggregated at level 2.
    pub fn micro(skip_mode: SkipMode) -> Self {
        ModelConfig {
            num_stages: 3,
            base_width: 8,
            in_channels: 1,
            blocks_per_stage: vec![1; 5],
            skip_mode,
            msiam_reduction: vec![Reduction::new(1, 2); 2],
            target_level: 2,
            ..ModelConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Channels of encoder stage `n`.
    pub fn stage_channels(&self, n: usize) -> usize {
        self.base_width << (n - 1)
    }

    /// Output shape of encoder stage `n` for an input of shape `input`.
    pub fn stage_shape(&self, input: Shape, n: usize) -> Shape {
        Shape { n: input.n, c: self.stage_channels(n), h: input.h >> (n - 1), w: input.w >> (n - 1) }
    }

    /// Channels of stage `n` after the MSIAM channel reduction.
    pub fn reduced_channels(&self, n: usize) -> Result<usize> {
        let ratio = self
            .msiam_reduction
            .get(n - 1)
            .ok_or_else(|| Error::config(format!("no reduction ratio for stage {n}")))?;
        ratio.apply(self.stage_channels(n)).ok_or_else(|| {
            Error::config(format!("stage {n}: {} channels x {ratio} is not a positive integer", self.stage_channels(n)))
        })
    }

    /// Channel count of a per-pixel budget of `elems_at_level_1` elements when
    /// laid out at resolution level `level`, if integral.
    fn channels_at_level(elems: usize, from_level: usize, to_level: usize) -> Option<usize> {
        if to_level >= from_level {
            Some(elems << (2 * (to_level - from_level)))
        } else {
            let div = 1usize << (2 * (from_level - to_level));
            elems.is_multiple_of(div).then(|| elems / div)
        }
    }

    /// Channels of stage `n`'s reduced map after resizing to the target level.
    pub fn resized_channels(&self, n: usize) -> Result<usize> {
        let c = self.reduced_channels(n)?;
        Self::channels_at_level(c, n, self.target_level).ok_or_else(|| {
            Error::config(format!(
                "stage {n}: {c} reduced channels cannot be pixel-shuffled up to level {}",
                self.target_level
            ))
        })
    }

    /// Channels of the aggregated map at the target level.
    pub fn aggregated_channels(&self) -> Result<usize> {
        (1..self.num_stages).map(|n| self.resized_channels(n)).sum()
    }

    pub fn aggregated_shape(&self, input: Shape) -> Result<Shape> {
        let t = self.target_level;
        Ok(Shape { n: input.n, c: self.aggregated_channels()?, h: input.h >> (t - 1), w: input.w >> (t - 1) })
    }

    /// Channels of the aggregated map after resizing to stage `n` inside the IEM.
    pub fn iem_resized_channels(&self, n: usize) -> Result<usize> {
        let c = self.aggregated_channels()?;
        Self::channels_at_level(c, self.target_level, n).ok_or_else(|| {
            Error::config(format!("aggregated map with {c} channels cannot be pixel-shuffled to stage {n}"))
        })
    }

    pub fn encoder_blocks(&self, n: usize) -> usize {
        self.blocks_per_stage[n - 1]
    }

    pub fn decoder_blocks(&self, k: usize) -> usize {
        self.blocks_per_stage[self.num_stages + (self.num_stages - 1 - k)]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if !(2..=16).contains(&n) {
            return Err(Error::config(format!("num_stages must be in 2..=16, got {n}")));
        }
        if self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::config("base_width and in_channels must be positive"));
        }
        if self.blocks_per_stage.len() != 2 * n - 1 {
            return Err(Error::config(format!(
                "blocks_per_stage needs {} entries (encoder 1..{n}, decoder {}..1), got {}",
                2 * n - 1,
                n - 1,
                self.blocks_per_stage.len()
            )));
        }
        if self.msiam_reduction.len() != n - 1 {
            return Err(Error::config(format!(
                "msiam_reduction needs {} entries, got {}",
                n - 1,
                self.msiam_reduction.len()
            )));
        }
        if !(1..n).contains(&self.target_level) {
            return Err(Error::config(format!("target_level must be in 1..={}, got {}", n - 1, self.target_level)));
        }
        if let SkipMode::SingleAt(k) = self.skip_mode {
            if !(1..n).contains(&k) {
                return Err(Error::config(format!("single skip stage must be in 1..={}, got {k}", n - 1)));
            }
        }
        if ![8, 16, 32].contains(&self.accounting_bits) {
            return Err(Error::config(format!("accounting_bits must be 8, 16 or 32, got {}", self.accounting_bits)));
        }
        if self.iem_expand == 0 {
            return Err(Error::config("iem_expand must be positive"));
        }
        if self.separable_kernel.is_multiple_of(2) {
            return Err(Error::config("separable_kernel must be odd"));
        }
        if self.skip_mode == SkipMode::MsiamIem {
            for stage in 1..n {
                self.resized_channels(stage)?;
                self.iem_resized_channels(stage)?;
            }
        }
        Ok(())
    }

    /// Checks that `input` fits this model: channel count and spatial
    /// divisibility by `2^(N-1)`.
    pub fn validate_input(&self, input: Shape) -> Result<()> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {input}", self.in_channels)));
        }
        let div = 1usize << (self.num_stages - 1);
        if !input.h.is_multiple_of(div) || !input.w.is_multiple_of(div) {
            return Err(Error::shape(format!("input {input} spatial dims must be divisible by {div}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_arithmetic() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let reduced: Vec<usize> = (1..5).map(|n| cfg.reduced_channels(n).unwrap()).collect();
        assert_eq!(reduced, vec![2, 4, 8, 32]);
        let resized: Vec<usize> = (1..5).map(|n| cfg.resized_channels(n).unwrap()).collect();
        assert_eq!(resized, vec![128, 64, 32, 32]);
        assert_eq!(cfg.aggregated_channels().unwrap(), 256);
        let input = Shape::new(1, 3, 256, 256).unwrap();
        assert_eq!(cfg.aggregated_shape(input).unwrap(), Shape::new(1, 256, 32, 32).unwrap());
        let iem: Vec<usize> = (1..5).map(|n| cfg.iem_resized_channels(n).unwrap()).collect();
        assert_eq!(iem, vec![4, 16, 64, 256]);
        assert_eq!(cfg.stage_shape(input, 4), Shape::new(1, 256, 32, 32).unwrap());
    }

    #[test]
    fn skip_mode_strings() {
        for m in [SkipMode::Full, SkipMode::None, SkipMode::SingleAt(3), SkipMode::MsiamIem] {
            assert_eq!(m.to_string().parse::<SkipMode>().unwrap(), m);
        }
        assert!("single:x".parse::<SkipMode>().is_err());
        assert!("half".parse::<SkipMode>().is_err());
    }

    #[test]
    fn reduction_parsing() {
        assert_eq!("1/16".parse::<Reduction>().unwrap(), Reduction::new(1, 16));
        assert_eq!("2".parse::<Reduction>().unwrap(), Reduction::new(2, 1));
        assert!("0/3".parse::<Reduction>().is_err());
        assert!("a/b".parse::<Reduction>().is_err());
        assert_eq!(Reduction::new(1, 16).apply(32), Some(2));
        assert_eq!(Reduction::new(1, 16).apply(8), None);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig { skip_mode: SkipMode::SingleAt(2), ..ModelConfig::default() };
        let text = cfg.to_toml();
        assert!(text.contains("skip_mode = \"single:2\""));
        assert!(text.contains("\"1/16\""));
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ModelConfig::default();
        cfg.blocks_per_stage.pop();
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { target_level: 5, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { skip_mode: SkipMode::SingleAt(5), ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        // 32 reduced channels of stage 4 cannot be shuffled up three levels
        let cfg = ModelConfig { target_level: 1, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig { accounting_bits: 12, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::default();
        assert!(cfg.validate_input(Shape::new(1, 3, 100, 100).unwrap()).is_err());
        assert!(cfg.validate_input(Shape::new(1, 1, 256, 256).unwrap()).is_err());
    }

    #[test]
    fn decoder_block_indexing() {
        let cfg = ModelConfig { blocks_per_stage: (0..9).collect(), ..ModelConfig::default() };
        assert_eq!(cfg.encoder_blocks(1), 0);
        assert_eq!(cfg.encoder_blocks(5), 4);
        assert_eq!(cfg.decoder_blocks(4), 5);
        assert_eq!(cfg.decoder_blocks(1), 8);
    }
}
