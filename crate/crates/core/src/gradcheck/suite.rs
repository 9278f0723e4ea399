//! The per-op finite-difference suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, FdOptions, GradCheckReport};
use crate::arch::{ModelConfig, SkipMode, UNet};
use crate::basic::{add, affine, concat_channels, ln, mean, mul, split_channels, sub, sum};
use crate::error::Result;
use crate::layers::{Conv2d, ConvNextV2Block, ResBlock, SeparableConv};
use crate::ops::{conv2d, gelu, grn, layer_norm_channelwise, pixel_shuffle, pixel_unshuffle, ConvGeometry};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::train::psnr_loss;

/// One named entry of a gradient suite.
pub struct GradCase {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<GradCheckReport> + Send + Sync>,
}

impl GradCase {
    pub fn new<F>(name: impl Into<String>, run: F) -> Self
    where
        F: Fn() -> Result<GradCheckReport> + Send + Sync + 'static,
    {
        GradCase { name: name.into(), run: Box::new(run) }
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize), lo: f32, hi: f32) -> Tensor {
    let s = Shape::new(dims.0, dims.1, dims.2, dims.3).expect("valid test shape");
    Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(lo..hi)).collect()).expect("length")
}

/// Inputs named `x0, x1, ...`, uniform in [-1, 1].
fn inputs(seed: u64, dims: &[(usize, usize, usize, usize)]) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (i, d) in dims.iter().enumerate() {
        p.add(format!("x{i}"), uniform(&mut rng, *d, -1.0, 1.0)).expect("unique");
    }
    p
}

macro_rules! case {
    ($name:expr, $params:expr, |$tape:ident, $p:ident| $body:expr) => {
        GradCase::new($name, move || {
            let params: ParamSet = $params;
            check($name, &params, |$tape, $p| $body, &FdOptions::op())
        })
    };
}

fn id(p: &ParamSet, name: &str) -> ParamId {
    p.id_of(name).expect("registered")
}

/// Jitters the per-channel vectors (biases, norm and GRN affines) by
/// U(-0.5, 0.5) so no backward path is trivially zero. Conv weights keep their
/// fan-in initialisation and inputs are left untouched.
fn randomised(mut p: ParamSet, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for param in p.iter_mut() {
        let s = param.tensor.shape();
        if param.name.starts_with('x') || (s.n, s.h, s.w) != (1, 1, 1) {
            continue;
        }
        for v in param.tensor.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

/// Checks a layer applied to input `x0`, with all parameters randomised.
fn layer_case<F>(name: &str, params: ParamSet, forward: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamSet, Var<'t>) -> Result<Var<'t>>,
{
    let seed = params.num_elements() as u64;
    let params = randomised(params, seed);
    let x = id(&params, "x0");
    check(name, &params, |t, p| forward(t, p, t.param(p, x)), &FdOptions::op())
}

/// Every differentiable op, on random inputs in [-1, 1] with shapes no larger
/// than (2, 8, 16, 16).
pub fn op_suite() -> Vec<GradCase> {
    let small = (2, 3, 4, 4);
    vec![
        case!("add", inputs(1, &[small, small]), |t, p| add(t.param(p, id(p, "x0")), t.param(p, id(p, "x1")))),
        case!("sub", inputs(2, &[small, small]), |t, p| sub(t.param(p, id(p, "x0")), t.param(p, id(p, "x1")))),
        case!("mul", inputs(3, &[small, small]), |t, p| mul(t.param(p, id(p, "x0")), t.param(p, id(p, "x1")))),
        case!("mul_scalar", inputs(4, &[small, (1, 1, 1, 1)]), |t, p| mul(
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1"))
        )),
        case!("affine", inputs(5, &[small]), |t, p| Ok(affine(t.param(p, id(p, "x0")), -1.5, 0.25))),
        case!(
            "ln",
            {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let mut p = ParamSet::new();
                p.add("x0", uniform(&mut rng, small, 0.5, 1.5)).unwrap();
                p
            },
            |t, p| ln(t.param(p, id(p, "x0")))
        ),
        case!("sum", inputs(7, &[small]), |t, p| Ok(sum(t.param(p, id(p, "x0"))))),
        case!("mean", inputs(8, &[small]), |t, p| Ok(mean(t.param(p, id(p, "x0"))))),
        case!("concat_channels", inputs(9, &[(2, 2, 4, 4), (2, 3, 4, 4)]), |t, p| concat_channels(&[
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1"))
        ])),
        case!("split_channels", inputs(10, &[(2, 5, 3, 3)]), |t, p| {
            let parts = split_channels(t.param(p, id(p, "x0")), &[2, 3])?;
            concat_channels(&[parts[1], parts[0]])
        }),
        case!("conv2d_3x3", inputs(11, &[(2, 3, 8, 8), (4, 3, 3, 3), (1, 4, 1, 1)]), |t, p| conv2d(
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1")),
            Some(t.param(p, id(p, "x2"))),
            ConvGeometry::same(3)
        )),
        case!("conv2d_stride2", inputs(12, &[(1, 4, 8, 8), (8, 4, 3, 3)]), |t, p| conv2d(
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1")),
            None,
            ConvGeometry { stride: 2, padding: 1, groups: 1 }
        )),
        case!("conv2d_grouped", inputs(13, &[(1, 4, 6, 6), (6, 2, 3, 3)]), |t, p| conv2d(
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1")),
            None,
            ConvGeometry { stride: 1, padding: 1, groups: 2 }
        )),
        GradCase::new("pointwise_conv", || {
            let mut p = inputs(14, &[(2, 4, 8, 8)]);
            let layer = Conv2d::pointwise(&mut p, &mut ChaCha8Rng::seed_from_u64(14), "pw", 4, 2, true)?;
            layer_case("pointwise_conv", p, move |t, p, x| layer.forward(t, p, x))
        }),
        GradCase::new("depthwise_conv", || {
            let mut p = inputs(15, &[(1, 3, 8, 8)]);
            let layer = Conv2d::depthwise(&mut p, &mut ChaCha8Rng::seed_from_u64(15), "dw", 3, 5, true)?;
            layer_case("depthwise_conv", p, move |t, p, x| layer.forward(t, p, x))
        }),
        GradCase::new("separable_conv", || {
            let mut p = inputs(16, &[(1, 4, 6, 6)]);
            let layer = SeparableConv::new(&mut p, &mut ChaCha8Rng::seed_from_u64(16), "sep", (4, 6, 3), true)?;
            layer_case("separable_conv", p, move |t, p, x| layer.forward(t, p, x))
        }),
        case!("pixel_unshuffle", inputs(17, &[(2, 2, 8, 8)]), |t, p| pixel_unshuffle(t.param(p, id(p, "x0")), 2)),
        case!("pixel_shuffle", inputs(18, &[(2, 8, 4, 4)]), |t, p| pixel_shuffle(t.param(p, id(p, "x0")), 2)),
        case!("layer_norm_channelwise", inputs(19, &[(2, 6, 4, 4), (1, 6, 1, 1), (1, 6, 1, 1)]), |t, p| {
            layer_norm_channelwise(t.param(p, id(p, "x0")), t.param(p, id(p, "x1")), t.param(p, id(p, "x2")), 1e-6)
        }),
        case!("grn", inputs(20, &[(2, 6, 4, 4), (1, 6, 1, 1), (1, 6, 1, 1)]), |t, p| grn(
            t.param(p, id(p, "x0")),
            t.param(p, id(p, "x1")),
            t.param(p, id(p, "x2")),
            1e-6
        )),
        case!("gelu", inputs(21, &[(2, 8, 8, 8)]), |t, p| Ok(gelu(t.param(p, id(p, "x0"))))),
        GradCase::new("convnext_v2_block", || {
            let mut p = inputs(22, &[(1, 4, 8, 8)]);
            let block = ConvNextV2Block::new(&mut p, &mut ChaCha8Rng::seed_from_u64(22), "cnx", 4, 4, true)?;
            layer_case("convnext_v2_block", p, move |t, p, x| block.forward(t, p, x))
        }),
        GradCase::new("res_block", || {
            let mut p = inputs(23, &[(1, 4, 8, 8)]);
            let block = ResBlock::new(&mut p, &mut ChaCha8Rng::seed_from_u64(23), "res", 4, true)?;
            layer_case("res_block", p, move |t, p, x| block.forward(t, p, x))
        }),
        case!("psnr_loss", inputs(24, &[(2, 3, 4, 4)]), |t, p| psnr_loss(
            t.param(p, id(p, "x0")),
            t.constant(uniform(&mut ChaCha8Rng::seed_from_u64(124), (2, 3, 4, 4), -1.0, 1.0)),
            1.0
        )),
    ]
}

/// The smallest model of a skip mode: three stages of width 4, 16x16 input,
/// no global residual.
pub fn micro_model_config(mode: SkipMode) -> ModelConfig {
    ModelConfig { base_width: 4, global_residual: false, ..ModelConfig::micro(mode) }
}

/// End-to-end check of a micro model: 50 coordinates sampled over all
/// parameters and the input.
pub fn model_case(mode: SkipMode) -> GradCase {
    let name = format!("model[{mode}]");
    GradCase::new(name.clone(), move || {
        let cfg = micro_model_config(mode);
        let mut p = inputs(25, &[(1, cfg.in_channels, 16, 16)]);
        let model = UNet::build(&cfg, &mut p, &mut ChaCha8Rng::seed_from_u64(25))?;
        let p = randomised(p, 26);
        let x = id(&p, "x0");
        check(&name, &p, |t, p| model.forward(t, p, t.param(p, x)), &FdOptions::model())
    })
}

/// Every op followed by the end-to-end model check.
pub fn full_suite() -> Vec<GradCase> {
    let mut cases = op_suite();
    cases.push(model_case(SkipMode::MsiamIem));
    cases
}
