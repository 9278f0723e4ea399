//! The encoder-decoder network and its skip variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SkipMode};
use crate::basic::{add, concat_channels};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvNextV2Block, ResBlock, SeparableConv};
use crate::memory::{Phase, TraceRecorder};
use crate::ops::{pixel_shuffle, pixel_unshuffle, ConvGeometry};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Shape;

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<ResBlock>,
    /// Stride-2 3x3 conv into the next stage; absent on the bottleneck.
    pub down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// 1x1 conv to `4 * C_k` channels, followed by a 2x pixel shuffle.
    pub up: Conv2d,
    pub blocks: Vec<ResBlock>,
}

/// Multi-scale aggregation: per-stage channel reduction and resize, then
/// concatenation and a point-wise fusion.
#[derive(Clone, Debug)]
pub struct Msiam {
    pub reduce: Vec<Conv2d>,
    pub fuse: Conv2d,
}

/// ConvNeXt V2 block followed by a separable conv to the stage width.
#[derive(Clone, Debug)]
pub struct EnhancementHeader {
    pub block: ConvNextV2Block,
    pub sep: SeparableConv,
}

/// One enhancement header per skip stage, index `n - 1`.
#[derive(Clone, Debug)]
pub struct Iem {
    pub headers: Vec<EnhancementHeader>,
}

/// Encoder outputs `E_1..E_N`, index `n - 1`.
pub struct StageFeatures<'t> {
    pub features: Vec<Var<'t>>,
}

/// Everything a forward pass exposes besides the output.
pub struct ForwardOutput<'t> {
    pub output: Var<'t>,
    /// Encoder outputs `E_1..E_N`.
    pub encoder: Vec<Var<'t>>,
    /// The aggregated map, in `MsiamIem` mode.
    pub aggregated: Option<Var<'t>>,
    /// IEM outputs for stages `1..N-1`, in `MsiamIem` mode.
    pub iem: Vec<Var<'t>>,
}

/// Initial weight scale of the output convolution under a global residual.
pub const HEAD_GAIN: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: ModelConfig,
    pub intro: Conv2d,
    pub encoder: Vec<EncoderStage>,
    /// Decoder stages indexed by stage number minus one.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
    pub msiam: Option<Msiam>,
    pub iem: Option<Iem>,
}

/// Pixel (un)shuffle between resolution levels; level 1 is full resolution.
fn resize_level<'t>(x: Var<'t>, from: usize, to: usize) -> Result<Var<'t>> {
    use std::cmp::Ordering::*;
    match to.cmp(&from) {
        Equal => Ok(x),
        Greater => pixel_unshuffle(x, 1 << (to - from)),
        Less => pixel_shuffle(x, 1 << (from - to)),
    }
}

impl UNet {
    /// Builds the model and a freshly initialised parameter set.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(cfg, &mut params, &mut rng)?;
        Ok((model, params))
    }

    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n_stages = cfg.num_stages;
        let bias = cfg.conv_bias;
        let c1 = cfg.stage_channels(1);
        let intro = Conv2d::new(params, rng, "intro", (cfg.in_channels, c1, 3), ConvGeometry::same(3), bias)?;
        let mut encoder = Vec::with_capacity(n_stages);
        for n in 1..=n_stages {
            let c = cfg.stage_channels(n);
            let blocks = (0..cfg.encoder_blocks(n))
                .map(|i| ResBlock::new(params, rng, &format!("enc{n}.block{i}"), c, bias))
                .collect::<Result<_>>()?;
            let down = if n < n_stages {
                let geom = ConvGeometry { stride: 2, padding: 1, groups: 1 };
                Some(Conv2d::new(params, rng, &format!("enc{n}.down"), (c, 2 * c, 3), geom, bias)?)
            } else {
                None
            };
            encoder.push(EncoderStage { blocks, down });
        }
        let mut decoder = Vec::with_capacity(n_stages - 1);
        for k in 1..n_stages {
            let c = cfg.stage_channels(k);
            let up = Conv2d::pointwise(params, rng, &format!("dec{k}.up"), 2 * c, 4 * c, bias)?;
            let blocks = (0..cfg.decoder_blocks(k))
                .map(|i| ResBlock::new(params, rng, &format!("dec{k}.block{i}"), c, bias))
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { up, blocks });
        }
        let head = Conv2d::new(params, rng, "head", (c1, cfg.in_channels, 3), ConvGeometry::same(3), bias)?;
        if cfg.global_residual {
            head.scale_weight(params, HEAD_GAIN);
        }
        let (msiam, iem) = if cfg.skip_mode == SkipMode::MsiamIem {
            let reduce = (1..n_stages)
                .map(|n| {
                    Conv2d::pointwise(
                        params,
                        rng,
                        &format!("msiam.reduce{n}"),
                        cfg.stage_channels(n),
                        cfg.reduced_channels(n)?,
                        bias,
                    )
                })
                .collect::<Result<_>>()?;
            let agg = cfg.aggregated_channels()?;
            let fuse = Conv2d::pointwise(params, rng, "msiam.fuse", agg, agg, bias)?;
            let headers = (1..n_stages)
                .map(|n| {
                    let c_in = cfg.iem_resized_channels(n)?;
                    Ok(EnhancementHeader {
                        block: ConvNextV2Block::new(params, rng, &format!("iem{n}.cnx"), c_in, cfg.iem_expand, bias)?,
                        sep: SeparableConv::new(
                            params,
                            rng,
                            &format!("iem{n}.sep"),
                            (c_in, cfg.stage_channels(n), cfg.separable_kernel),
                            bias,
                        )?,
                    })
                })
                .collect::<Result<_>>()?;
            (Some(Msiam { reduce, fuse }), Some(Iem { headers }))
        } else {
            (None, None)
        };
        Ok(UNet { cfg: cfg.clone(), intro, encoder, decoder, head, msiam, iem })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Runs encoder stage `n` on its input; returns `E_n` and the input of
    /// stage `n + 1` (if any).
    pub fn encoder_stage<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        n: usize,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let stage = &self.encoder[n - 1];
        let mut h = x;
        for block in &stage.blocks {
            h = block.forward(tape, params, h)?;
        }
        let next = stage.down.as_ref().map(|d| d.forward(tape, params, h)).transpose()?;
        Ok((h, next))
    }

    /// Intro conv and all encoder stages.
    pub fn encoder_forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<StageFeatures<'t>> {
        self.cfg.validate_input(x.shape())?;
        let mut h = self.intro.forward(tape, params, x)?;
        let mut features = Vec::with_capacity(self.cfg.num_stages);
        for n in 1..=self.cfg.num_stages {
            let (e, next) = self.encoder_stage(tape, params, n, h)?;
            features.push(e);
            if let Some(next) = next {
                h = next;
            }
        }
        Ok(StageFeatures { features })
    }

    fn msiam_ref(&self) -> Result<&Msiam> {
        self.msiam.as_ref().ok_or_else(|| Error::config(format!("model in `{}` mode has no MSIAM", self.cfg.skip_mode)))
    }

    /// Channel reduction and resize of `E_n` to the target level.
    pub fn msiam_reduce<'t>(&self, tape: &'t Tape, params: &ParamSet, n: usize, e: Var<'t>) -> Result<Var<'t>> {
        let reduced = self.msiam_ref()?.reduce[n - 1].forward(tape, params, e)?;
        resize_level(reduced, n, self.cfg.target_level)
    }

    /// Concatenates the reduced maps and fuses them point-wise.
    pub fn msiam_aggregate<'t>(&self, tape: &'t Tape, params: &ParamSet, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let cat = concat_channels(parts)?;
        self.msiam_ref()?.fuse.forward(tape, params, cat)
    }

    /// `E' = PWConv(RS(RC(E_1)) || ... || RS(RC(E_{N-1})))`.
    pub fn msiam_forward<'t>(&self, tape: &'t Tape, params: &ParamSet, feats: &StageFeatures<'t>) -> Result<Var<'t>> {
        let parts = (1..self.cfg.num_stages)
            .map(|n| self.msiam_reduce(tape, params, n, feats.features[n - 1]))
            .collect::<Result<Vec<_>>>()?;
        self.msiam_aggregate(tape, params, &parts)
    }

    /// Regenerates a stage-`n` skip feature from the aggregated map.
    pub fn iem_forward<'t>(&self, tape: &'t Tape, params: &ParamSet, aggregated: Var<'t>, n: usize) -> Result<Var<'t>> {
        let iem = self.iem.as_ref().ok_or_else(|| Error::config("model has no IEM"))?;
        let header =
            iem.headers.get(n.wrapping_sub(1)).ok_or_else(|| Error::config(format!("no IEM for stage {n}")))?;
        let x = resize_level(aggregated, self.cfg.target_level, n)?;
        let x = header.block.forward(tape, params, x)?;
        header.sep.forward(tape, params, x)
    }

    /// Decoder stage `k`: upsample, fuse the optional skip by addition, blocks.
    pub fn decoder_stage<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        k: usize,
        x: Var<'t>,
        skip: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let stage = &self.decoder[k - 1];
        let mut h = pixel_shuffle(stage.up.forward(tape, params, x)?, 2)?;
        if let Some(s) = skip {
            if s.shape() != h.shape() {
                return Err(Error::shape(format!("decoder stage {k}: skip {} vs upsampled {}", s.shape(), h.shape())));
            }
            h = add(h, s)?;
        }
        for block in &stage.blocks {
            h = block.forward(tape, params, h)?;
        }
        Ok(h)
    }

    /// Runs stages `N-1..1`; `skip_inputs[k-1]` feeds decoder stage `k`.
    pub fn decoder_forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        bottleneck: Var<'t>,
        skip_inputs: &[Option<Var<'t>>],
    ) -> Result<Var<'t>> {
        if skip_inputs.len() != self.cfg.num_stages - 1 {
            return Err(Error::Arity(format!(
                "decoder expects {} skip slots, got {}",
                self.cfg.num_stages - 1,
                skip_inputs.len()
            )));
        }
        let mut h = bottleneck;
        for k in (1..self.cfg.num_stages).rev() {
            h = self.decoder_stage(tape, params, k, h, skip_inputs[k - 1])?;
        }
        Ok(h)
    }

    fn finish<'t>(&self, tape: &'t Tape, params: &ParamSet, d1: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.head.forward(tape, params, d1)?;
        if self.cfg.global_residual {
            add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_detailed(tape, params, x, None)?.output)
    }

    /// Full forward pass. When `trace` is given, every skip buffer that must
    /// stay resident for a later decoder stage is reported to it.
    ///
    /// In `MsiamIem` mode each `E_n` is reduced as soon as it is produced, so
    /// only reduced maps (and then the aggregated map) are ever resident.
    pub fn forward_detailed<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        x: Var<'t>,
        mut trace: Option<&mut TraceRecorder>,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.cfg;
        cfg.validate_input(x.shape())?;
        let n_stages = cfg.num_stages;
        let keeps = |n: usize| match cfg.skip_mode {
            SkipMode::Full => true,
            SkipMode::SingleAt(k) => k == n,
            SkipMode::None | SkipMode::MsiamIem => false,
        };
        let alloc = |trace: &mut Option<&mut TraceRecorder>, tag: &str, s: Shape| {
            if let Some(t) = trace.as_deref_mut() {
                t.alloc(tag, s);
            }
        };

        let mut h = self.intro.forward(tape, params, x)?;
        let mut encoder = Vec::with_capacity(n_stages);
        let mut reduced = Vec::new();
        let mut aggregated = None;
        for n in 1..=n_stages {
            let (e, next) = self.encoder_stage(tape, params, n, h)?;
            encoder.push(e);
            if n < n_stages {
                if keeps(n) {
                    alloc(&mut trace, &format!("E{n}"), e.shape());
                }
                if cfg.skip_mode == SkipMode::MsiamIem {
                    let r = self.msiam_reduce(tape, params, n, e)?;
                    alloc(&mut trace, &format!("R{n}"), r.shape());
                    reduced.push(r);
                    if n == n_stages - 1 {
                        let agg = self.msiam_aggregate(tape, params, &reduced)?;
                        if let Some(t) = trace.as_deref_mut() {
                            for m in 1..=reduced.len() {
                                t.free(&format!("R{m}"));
                            }
                            t.alloc("E'", agg.shape());
                        }
                        reduced.clear();
                        aggregated = Some(agg);
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.end_phase(Phase::Encoder(n));
            }
            if let Some(next) = next {
                h = next;
            }
        }

        let mut iem = vec![None; n_stages - 1];
        let mut d = encoder[n_stages - 1];
        for k in (1..n_stages).rev() {
            let skip = match (cfg.skip_mode, aggregated) {
                (SkipMode::MsiamIem, Some(agg)) => {
                    let s = self.iem_forward(tape, params, agg, k)?;
                    iem[k - 1] = Some(s);
                    Some(s)
                }
                _ if keeps(k) => Some(encoder[k - 1]),
                _ => None,
            };
            d = self.decoder_stage(tape, params, k, d, skip)?;
            if let Some(t) = trace.as_deref_mut() {
                if keeps(k) {
                    t.free(&format!("E{k}"));
                }
                if cfg.skip_mode == SkipMode::MsiamIem && k == 1 {
                    t.free("E'");
                }
                t.end_phase(Phase::Decoder(k));
            }
        }
        let output = self.finish(tape, params, d, x)?;
        Ok(ForwardOutput { output, encoder, aggregated, iem: iem.into_iter().flatten().collect() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::count_macs;
    use crate::memory::skip_timeline;
    use crate::tensor::Tensor;

    fn input(cfg: &ModelConfig, hw: usize, seed: u64) -> Tensor {
        let s = Shape::new(1, cfg.in_channels, hw, hw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn modes() -> Vec<SkipMode> {
        vec![SkipMode::Full, SkipMode::None, SkipMode::SingleAt(1), SkipMode::SingleAt(2), SkipMode::MsiamIem]
    }

    #[test]
    fn output_shape_matches_input_in_every_mode() {
        for mode in modes() {
            let cfg = ModelConfig::micro(mode);
            let (model, params) = UNet::init(&cfg, 0).unwrap();
            let tape = Tape::new();
            let x = tape.constant(input(&cfg, 16, 1));
            let y = model.forward(&tape, &params, x).unwrap();
            assert_eq!(y.shape(), x.shape(), "{mode}");
            assert!(y.value().is_finite());
        }
    }

    #[test]
    fn iem_outputs_match_encoder_shapes() {
        let cfg = ModelConfig::micro(SkipMode::MsiamIem);
        let (model, params) = UNet::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let out = model.forward_detailed(&tape, &params, tape.constant(input(&cfg, 16, 2)), None).unwrap();
        let agg = out.aggregated.unwrap();
        assert_eq!(agg.shape(), cfg.aggregated_shape(Shape::new(1, 1, 16, 16).unwrap()).unwrap());
        assert_eq!(out.iem.len(), cfg.num_stages - 1);
        for (n, s) in out.iem.iter().enumerate() {
            assert_eq!(s.shape(), out.encoder[n].shape());
        }
    }

    #[test]
    fn traced_forward_matches_symbolic_timeline() {
        let mut configs: Vec<ModelConfig> = modes().into_iter().map(ModelConfig::micro).collect();
        let mut wide = ModelConfig::micro(SkipMode::MsiamIem);
        wide.num_stages = 4;
        wide.base_width = 16;
        wide.blocks_per_stage = vec![1; 7];
        wide.msiam_reduction = vec!["1/4".parse().unwrap(); 3];
        wide.target_level = 3;
        configs.push(wide.clone());
        configs.push(wide.with_skip_mode(SkipMode::Full));
        for cfg in configs {
            let (model, params) = UNet::init(&cfg, 5).unwrap();
            let tape = Tape::new();
            let x = input(&cfg, 16, 6);
            let mut rec = TraceRecorder::new(cfg.accounting_bits);
            model.forward_detailed(&tape, &params, tape.constant(x.clone()), Some(&mut rec)).unwrap();
            let traced = rec.finish();
            let symbolic = skip_timeline(&cfg, x.shape()).unwrap();
            assert_eq!(traced.samples, symbolic.samples, "{}", cfg.skip_mode);
            assert_eq!(traced.net_bytes(), 0);
        }
    }

    #[test]
    fn tape_macs_match_analytic_count() {
        for mode in modes() {
            let cfg = ModelConfig::micro(mode);
            let (model, params) = UNet::init(&cfg, 0).unwrap();
            let tape = Tape::new();
            let x = input(&cfg, 16, 1);
            model.forward(&tape, &params, tape.constant(x.clone())).unwrap();
            assert_eq!(tape.macs(), count_macs(&cfg, x.shape()).unwrap(), "{mode}");
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig::micro(SkipMode::Full);
        let (model, params) = UNet::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 18, 16).unwrap()));
        assert!(matches!(model.forward(&tape, &params, x), Err(Error::Shape(_))));
    }

    #[test]
    fn only_msiam_iem_carries_extra_parameters() {
        let (_, full) = UNet::init(&ModelConfig::micro(SkipMode::Full), 0).unwrap();
        let (_, ours) = UNet::init(&ModelConfig::micro(SkipMode::MsiamIem), 0).unwrap();
        assert_eq!(
            ours.num_elements() - full.num_elements(),
            ours.num_elements_with_prefix("msiam.") + ours.num_elements_with_prefix("iem")
        );
    }
}
