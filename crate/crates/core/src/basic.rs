//! Elementwise arithmetic, reductions and channel concatenation.
//!
//! Binary ops accept equal shapes or a one-element right operand; there is no
//! other broadcasting.

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
    b_scalar: bool,
}

impl Backward for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let g = ctx.grad_out;
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let bv = |i: usize| if self.b_scalar { b[0] } else { b[i] };
        let (ga, gb_full): (Vec<f32>, Vec<f32>) = match self.kind {
            BinaryKind::Add => (g.to_vec(), g.to_vec()),
            BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            BinaryKind::Mul => {
                (g.iter().enumerate().map(|(i, v)| v * bv(i)).collect(), g.iter().zip(a).map(|(v, x)| v * x).collect())
            }
        };
        let gb = if self.b_scalar { vec![gb_full.iter().sum()] } else { gb_full };
        Ok(vec![Some(ga), Some(gb)])
    }
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let b_scalar = bv.numel() == 1 && av.numel() != 1;
    if !b_scalar && av.shape() != bv.shape() {
        return Err(Error::shape(format!("{kind:?}: {} vs {}", av.shape(), bv.shape())));
    }
    let f = |x: f32, y: f32| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let data = if b_scalar {
        let y = bv.data()[0];
        av.data().iter().map(|&x| f(x, y)).collect()
    } else {
        av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    let out = Tensor::from_vec(av.shape(), data)?;
    Ok(a.tape().record(out, &[a, b], BinaryBackward { kind, b_scalar }))
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, BinaryKind::Add)
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, BinaryKind::Sub)
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, BinaryKind::Mul)
}

struct AffineBackward {
    scale: f32,
}

impl Backward for AffineBackward {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        Ok(vec![Some(ctx.grad_out.iter().map(|g| g * self.scale).collect())])
    }
}

/// `scale * x + shift` with constant coefficients.
pub fn affine(x: Var<'_>, scale: f32, shift: f32) -> Var<'_> {
    let xv = x.value();
    let data = xv.data().iter().map(|v| scale * v + shift).collect();
    let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
    x.tape().record(out, &[x], AffineBackward { scale })
}

struct LnBackward;

impl Backward for LnBackward {
    fn name(&self) -> &'static str {
        "ln"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let x = ctx.inputs[0].data();
        Ok(vec![Some(ctx.grad_out.iter().zip(x).map(|(g, v)| g / v).collect())])
    }
}

/// Natural logarithm; inputs must be strictly positive.
pub fn ln(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
        return Err(Error::Numeric(format!("ln of non-positive value {bad}")));
    }
    let data = xv.data().iter().map(|v| v.ln()).collect();
    let out = Tensor::from_vec(xv.shape(), data)?;
    Ok(x.tape().record(out, &[x], LnBackward))
}

struct SumBackward {
    scale: f32,
}

impl Backward for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let n = ctx.inputs[0].numel();
        Ok(vec![Some(vec![ctx.grad_out[0] * self.scale; n])])
    }
}

/// Sum of all elements, as a scalar tensor. Accumulates in f64.
pub fn sum(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
    x.tape().record(Tensor::scalar(s as f32), &[x], SumBackward { scale: 1.0 })
}

/// Mean of all elements, as a scalar tensor.
pub fn mean(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let n = xv.numel() as f64;
    let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
    x.tape().record(Tensor::scalar((s / n) as f32), &[x], SumBackward { scale: (1.0 / n) as f32 })
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let shape = ctx.output.shape();
        let parts = split_buffer(ctx.grad_out, shape, &self.channels);
        Ok(parts.into_iter().map(Some).collect())
    }
}

fn split_buffer(data: &[f32], shape: Shape, channels: &[usize]) -> Vec<Vec<f32>> {
    let plane = shape.plane();
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|c| Vec::with_capacity(shape.n * c * plane)).collect();
    for n in 0..shape.n {
        let mut c0 = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            let start = shape.index(n, c0, 0, 0);
            part.extend_from_slice(&data[start..start + c * plane]);
            c0 += c;
        }
    }
    parts
}

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Arity("concat_channels of an empty list".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let s0 = values[0].shape();
    for v in &values[1..] {
        let s = v.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::shape(format!("concat_channels: {s} incompatible with {s0}")));
        }
    }
    let channels: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
    let shape = Shape::new(s0.n, channels.iter().sum(), s0.h, s0.w)?;
    let plane = s0.plane();
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s0.n {
        for v in &values {
            let c = v.shape().c;
            let start = v.shape().index(n, 0, 0, 0);
            data.extend_from_slice(&v.data()[start..start + c * plane]);
        }
    }
    let out = Tensor::from_vec(shape, data)?;
    Ok(first.tape().record(out, parts, ConcatBackward { channels }))
}

struct SliceBackward {
    start: usize,
}

impl Backward for SliceBackward {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let in_shape = ctx.inputs[0].shape();
        let out_shape = ctx.output.shape();
        let plane = in_shape.plane();
        let mut g = vec![0.0; in_shape.numel()];
        for n in 0..in_shape.n {
            let src = out_shape.index(n, 0, 0, 0);
            let dst = in_shape.index(n, self.start, 0, 0);
            let len = out_shape.c * plane;
            g[dst..dst + len].copy_from_slice(&ctx.grad_out[src..src + len]);
        }
        Ok(vec![Some(g)])
    }
}

/// Splits along channels into consecutive chunks of the given sizes.
pub fn split_channels<'t>(x: Var<'t>, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
    let xv = x.value();
    let shape = xv.shape();
    if sizes.iter().sum::<usize>() != shape.c || sizes.contains(&0) {
        return Err(Error::shape(format!("split_channels: sizes {sizes:?} do not partition {} channels", shape.c)));
    }
    let buffers = split_buffer(xv.data(), shape, sizes);
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for (buf, &c) in buffers.into_iter().zip(sizes) {
        let t = Tensor::from_vec(Shape::new(shape.n, c, shape.h, shape.w)?, buf)?;
        out.push(x.tape().record(t, &[x], SliceBackward { start }));
        start += c;
    }
    Ok(out)
}
