//! Encoder-versus-IEM feature diagnostics on a fixed probe image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{SkipMode, UNet};
use crate::error::{Error, Result};
use crate::metrics::{representative_ability, FeatureDiagnostics, RaStats};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::train::synth_pair;

pub const PROBE_SEED: u64 = 0x9b0be;

/// A noisy procedural image whose side is at least 32 and divisible by
/// every stage stride of the model.
pub fn probe_image(model: &UNet, sigma: f32) -> Result<Tensor> {
    let cfg = model.config();
    let side = (1usize << (cfg.num_stages - 1)).max(32);
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    Ok(synth_pair(&mut rng, Shape::new(1, cfg.in_channels, side, side)?, sigma)?.0)
}

pub struct FeatureReport {
    /// One row per skip stage `1..N-1`, RA taken on the IEM output.
    pub rows: Vec<FeatureDiagnostics>,
    /// RA of the matching encoder outputs.
    pub encoder_ra: Vec<RaStats>,
    pub encoder: Vec<Tensor>,
    pub iem: Vec<Tensor>,
}

/// Compares each stage's encoder output with the IEM output that replaces it.
pub fn inspect_features(model: &UNet, params: &ParamSet, probe: &Tensor) -> Result<FeatureReport> {
    let mode = model.config().skip_mode;
    if mode != SkipMode::MsiamIem {
        return Err(Error::config(format!("feature inspection needs a msiam-iem model, got `{mode}`")));
    }
    let tape = Tape::new();
    let out = model.forward_detailed(&tape, params, tape.constant(probe.clone()), None)?;
    let iem: Vec<Tensor> = out.iem.iter().map(|v| (*v.value()).clone()).collect();
    let encoder: Vec<Tensor> = out.encoder[..iem.len()].iter().map(|v| (*v.value()).clone()).collect();
    report_from(&encoder, &iem)
}

/// Diagnostics for already-computed stage features.
pub fn report_from(encoder: &[Tensor], iem: &[Tensor]) -> Result<FeatureReport> {
    if encoder.len() != iem.len() {
        return Err(Error::Arity(format!("{} encoder maps for {} IEM maps", encoder.len(), iem.len())));
    }
    let rows = encoder
        .iter()
        .zip(iem)
        .enumerate()
        .map(|(i, (e, m))| FeatureDiagnostics::compute(i + 1, e, m))
        .collect::<Result<Vec<_>>>()?;
    let encoder_ra = encoder.iter().map(representative_ability).collect::<Result<Vec<_>>>()?;
    Ok(FeatureReport { rows, encoder_ra, encoder: encoder.to_vec(), iem: iem.to_vec() })
}
