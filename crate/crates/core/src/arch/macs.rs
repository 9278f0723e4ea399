//! Analytic multiply-accumulate counts, derived from the configuration
//! without building or running the model.

use super::config::{ModelConfig, SkipMode};
use crate::error::Result;
use crate::layers::ConvNextV2Block;
use crate::ops::conv_macs;
use crate::tensor::Shape;

/// Convolution MACs of one forward pass over `input`.
pub fn count_macs(cfg: &ModelConfig, input: Shape) -> Result<u64> {
    cfg.validate()?;
    cfg.validate_input(input)?;
    let n_stages = cfg.num_stages;
    let at = |c: usize, level: usize| Shape { n: input.n, c, h: input.h >> (level - 1), w: input.w >> (level - 1) };
    // 3x3 conv -> norm -> gelu -> 3x3 conv
    let res_block = |c: usize, level: usize| 2 * conv_macs(at(c, level), c, 1, 3);
    let mut total = conv_macs(at(cfg.stage_channels(1), 1), cfg.in_channels, 1, 3);
    for n in 1..=n_stages {
        let c = cfg.stage_channels(n);
        total += cfg.encoder_blocks(n) as u64 * res_block(c, n);
        if n < n_stages {
            total += conv_macs(at(2 * c, n + 1), c, 1, 3);
        }
    }
    for k in 1..n_stages {
        let c = cfg.stage_channels(k);
        total += conv_macs(at(4 * c, k + 1), 2 * c, 1, 1);
        total += cfg.decoder_blocks(k) as u64 * res_block(c, k);
    }
    total += conv_macs(at(cfg.in_channels, 1), cfg.stage_channels(1), 1, 3);

    if cfg.skip_mode == SkipMode::MsiamIem {
        let t = cfg.target_level;
        for n in 1..n_stages {
            total += conv_macs(at(cfg.reduced_channels(n)?, n), cfg.stage_channels(n), 1, 1);
        }
        let agg = cfg.aggregated_channels()?;
        total += conv_macs(at(agg, t), agg, 1, 1);
        for n in 1..n_stages {
            let c = cfg.iem_resized_channels(n)?;
            let hidden = c * cfg.iem_expand;
            let k7 = ConvNextV2Block::KERNEL;
            total += conv_macs(at(c, n), c, c, k7);
            total += conv_macs(at(hidden, n), c, 1, 1);
            total += conv_macs(at(c, n), hidden, 1, 1);
            total += conv_macs(at(c, n), c, c, cfg.separable_kernel);
            total += conv_macs(at(cfg.stage_channels(n), n), c, 1, 1);
        }
    }
    Ok(total)
}
