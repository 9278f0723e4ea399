//! Parameterised building blocks. Each layer registers its tensors in a
//! [`ParamSet`] under a dotted name prefix and reads them back at forward time.

use rand::Rng;

use crate::basic::add;
use crate::error::Result;
use crate::ops::activation::gelu;
use crate::ops::conv::{conv2d, ConvGeometry};
use crate::ops::norm::{grn, layer_norm_channelwise, GRN_EPS, LAYER_NORM_EPS};
use crate::params::{fan_in_uniform, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        (in_c, out_c, k): (usize, usize, usize),
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let w_shape = Shape::new(out_c, in_c / geom.groups.max(1), k, k)?;
        let fan_in = w_shape.c * k * k;
        let weight = params.add(format!("{name}.weight"), fan_in_uniform(rng, w_shape, fan_in))?;
        let bias =
            if bias { Some(params.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(out_c)?))?) } else { None };
        Ok(Conv2d { weight, bias, in_c, out_c, k, geom })
    }

    /// 1x1 convolution mixing channels.
    pub fn pointwise<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(params, rng, name, (in_c, out_c, 1), ConvGeometry::POINTWISE, bias)
    }

    /// Per-channel spatial filter (`groups == channels`), shape preserving for odd `k`.
    pub fn depthwise<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let geom = ConvGeometry { stride: 1, padding: k / 2, groups: channels };
        Self::new(params, rng, name, (channels, channels, k), geom, bias)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|b| tape.param(params, b));
        conv2d(x, w, b, self.geom)
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let g = self.geom;
        Shape {
            n: input.n,
            c: self.out_c,
            h: (input.h + 2 * g.padding - self.k) / g.stride + 1,
            w: (input.w + 2 * g.padding - self.k) / g.stride + 1,
        }
    }

    /// Multiplies the weights by `gain`.
    pub fn scale_weight(&self, params: &mut ParamSet, gain: f32) {
        for v in params.get_mut(self.weight).tensor.data_mut() {
            *v *= gain;
        }
    }
}

/// Depthwise convolution followed by a pointwise convolution.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl SeparableConv {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        (in_c, out_c, k): (usize, usize, usize),
        bias: bool,
    ) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: Conv2d::depthwise(params, rng, &format!("{name}.dw"), in_c, k, bias)?,
            pointwise: Conv2d::pointwise(params, rng, &format!("{name}.pw"), in_c, out_c, bias)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.depthwise.forward(tape, params, x)?;
        self.pointwise.forward(tape, params, y)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(params: &mut ParamSet, name: &str, c: usize) -> Result<Self> {
        Ok(ChannelNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(Shape::vector(c)?, 1.0))?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(Shape::vector(c)?))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm_channelwise(x, tape.param(params, self.gamma), tape.param(params, self.beta), LAYER_NORM_EPS)
    }
}

/// GRN with learnable gamma/beta, both zero at construction (identity map).
#[derive(Clone, Debug)]
pub struct Grn {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Grn {
    pub fn new(params: &mut ParamSet, name: &str, c: usize) -> Result<Self> {
        Ok(Grn {
            gamma: params.add(format!("{name}.gamma"), Tensor::zeros(Shape::vector(c)?))?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(Shape::vector(c)?))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        grn(x, tape.param(params, self.gamma), tape.param(params, self.beta), GRN_EPS)
    }
}

/// ConvNeXt V2 residual block:
/// 7x7 depthwise -> channel norm -> 1x1 expand -> GELU -> GRN -> 1x1 project, plus input.
#[derive(Clone, Debug)]
pub struct ConvNextV2Block {
    pub dwconv: Conv2d,
    pub norm: ChannelNorm,
    pub expand: Conv2d,
    pub grn: Grn,
    pub project: Conv2d,
}

impl ConvNextV2Block {
    pub const KERNEL: usize = 7;

    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c: usize,
        expand: usize,
        bias: bool,
    ) -> Result<Self> {
        let hidden = c * expand;
        Ok(ConvNextV2Block {
            dwconv: Conv2d::depthwise(params, rng, &format!("{name}.dwconv"), c, Self::KERNEL, bias)?,
            norm: ChannelNorm::new(params, &format!("{name}.norm"), c)?,
            expand: Conv2d::pointwise(params, rng, &format!("{name}.pwconv1"), c, hidden, bias)?,
            grn: Grn::new(params, &format!("{name}.grn"), hidden)?,
            project: Conv2d::pointwise(params, rng, &format!("{name}.pwconv2"), hidden, c, bias)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.dwconv.forward(tape, params, x)?;
        let y = self.norm.forward(tape, params, y)?;
        let y = self.expand.forward(tape, params, y)?;
        let y = gelu(y);
        let y = self.grn.forward(tape, params, y)?;
        let y = self.project.forward(tape, params, y)?;
        add(x, y)
    }
}

/// Backbone block: 3x3 conv -> channel norm -> GELU -> 3x3 conv, plus input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm: ChannelNorm,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R, name: &str, c: usize, bias: bool) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), (c, c, 3), ConvGeometry::same(3), bias)?,
            norm: ChannelNorm::new(params, &format!("{name}.norm"), c)?,
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), (c, c, 3), ConvGeometry::same(3), bias)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv1.forward(tape, params, x)?;
        let y = self.norm.forward(tape, params, y)?;
        let y = gelu(y);
        let y = self.conv2.forward(tape, params, y)?;
        add(x, y)
    }
}
