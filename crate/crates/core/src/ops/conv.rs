//! Grouped 2-d convolution with square kernels.

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Var};
use crate::tensor::{Shape, Tensor};

/// Static geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry { stride: 1, padding: 0, groups: 1 };

    /// Stride-1 convolution that keeps spatial size for odd `k`.
    pub fn same(k: usize) -> Self {
        ConvGeometry { stride: 1, padding: k / 2, groups: 1 }
    }
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Dims {
    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, kx, self.stride, self.pad)
    }

    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, ky, self.stride, self.pad)
    }

    fn macs(&self) -> u64 {
        (self.n * self.out_c * self.oh * self.ow) as u64 * (self.in_per_group() * self.k * self.k) as u64
    }
}

#[inline]
fn valid_range(out_len: usize, in_len: usize, kpos: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + kpos - pad < in_len
    let lo = if pad > kpos { (pad - kpos).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > kpos { (in_len + pad - kpos - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight independent partial sums so it vectorises.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn dims(x: Shape, w: Shape, geom: ConvGeometry) -> Result<Dims> {
    if geom.stride == 0 || geom.groups == 0 {
        return Err(Error::shape("conv2d: stride and groups must be positive"));
    }
    if w.h != w.w {
        return Err(Error::shape(format!("conv2d: kernel must be square, got {w}")));
    }
    if !x.c.is_multiple_of(geom.groups) || !w.n.is_multiple_of(geom.groups) {
        return Err(Error::shape(format!("conv2d: groups {} must divide in_c {} and out_c {}", geom.groups, x.c, w.n)));
    }
    if w.c != x.c / geom.groups {
        return Err(Error::shape(format!("conv2d: weight {w} expects {} input channels per group, input is {x}", w.c)));
    }
    let k = w.h;
    let (hp, wp) = (x.h + 2 * geom.padding, x.w + 2 * geom.padding);
    if hp < k || wp < k {
        return Err(Error::shape(format!("conv2d: padded input {hp}x{wp} smaller than kernel {k}")));
    }
    Ok(Dims {
        n: x.n,
        in_c: x.c,
        h: x.h,
        w: x.w,
        out_c: w.n,
        k,
        oh: (hp - k) / geom.stride + 1,
        ow: (wp - k) / geom.stride + 1,
        stride: geom.stride,
        pad: geom.padding,
        groups: geom.groups,
    })
}

fn forward(d: &Dims, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    if d.stride == 1 {
        return forward_unit_stride(d, x, w, bias);
    }
    let (opg, ipg) = (d.out_per_group(), d.in_per_group());
    let (k, oplane) = (d.k, d.oh * d.ow);
    let mut out = vec![0.0f32; d.n * d.out_c * oplane];
    for n in 0..d.n {
        for oc in 0..d.out_c {
            let g = oc / opg;
            let obase = (n * d.out_c + oc) * oplane;
            let o = &mut out[obase..obase + oplane];
            if let Some(b) = bias {
                o.fill(b[oc]);
            }
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let xbase = (n * d.in_c + ic) * d.h * d.w;
                for ky in 0..k {
                    let (oy0, oy1) = d.oy_range(ky);
                    for kx in 0..k {
                        let wv = w[((oc * ipg + icg) * k + ky) * k + kx];
                        let (ox0, ox1) = d.ox_range(kx);
                        for oy in oy0..oy1 {
                            let iy = oy * d.stride + ky - d.pad;
                            let xrow = xbase + iy * d.w;
                            let orow = oy * d.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * d.stride + kx - d.pad;
                                o[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv2dBackward {
    dims: Dims,
    has_bias: bool,
}

impl Backward for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let d = &self.dims;
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let go = ctx.grad_out;
        let (gx, gw) = if d.stride == 1 { backward_unit_stride(d, x, w, go) } else { backward_general(d, x, w, go) };
        let mut grads = vec![Some(gx), Some(gw)];
        if self.has_bias {
            let oplane = d.oh * d.ow;
            let mut gb = vec![0.0f32; d.out_c];
            for n in 0..d.n {
                for (oc, b) in gb.iter_mut().enumerate() {
                    let obase = (n * d.out_c + oc) * oplane;
                    *b += go[obase..obase + oplane].iter().sum::<f32>();
                }
            }
            grads.push(Some(gb));
        }
        Ok(grads)
    }
}

fn backward_general(d: &Dims, x: &[f32], w: &[f32], go: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (opg, ipg) = (d.out_per_group(), d.in_per_group());
    let (k, oplane) = (d.k, d.oh * d.ow);
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; w.len()];
    for n in 0..d.n {
        for oc in 0..d.out_c {
            let g = oc / opg;
            let obase = (n * d.out_c + oc) * oplane;
            let o = &go[obase..obase + oplane];
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let xbase = (n * d.in_c + ic) * d.h * d.w;
                for ky in 0..k {
                    let (oy0, oy1) = d.oy_range(ky);
                    for kx in 0..k {
                        let widx = ((oc * ipg + icg) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = d.ox_range(kx);
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * d.stride + ky - d.pad;
                            let xrow = xbase + iy * d.w;
                            let orow = oy * d.ow;
                            for ox in ox0..ox1 {
                                let ix = ox * d.stride + kx - d.pad;
                                let gv = o[orow + ox];
                                acc += gv * x[xrow + ix];
                                gx[xrow + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Zero-padded copies of every input plane, `(n * in_c, h + 2p, w + 2p)`.
fn pad_planes(d: &Dims, x: &[f32]) -> Vec<f32> {
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let mut out = vec![0.0f32; d.n * d.in_c * hp * wp];
    for (plane, src) in out.chunks_exact_mut(hp * wp).zip(x.chunks_exact(d.h * d.w)) {
        for (y, row) in src.chunks_exact(d.w).enumerate() {
            let start = (y + d.pad) * wp + d.pad;
            plane[start..start + d.w].copy_from_slice(row);
        }
    }
    out
}

// Stride-1 kernels work on output planes laid out with the padded row
// pitch, so each (ic, ky, kx) tap is a single contiguous axpy or dot. The
// `wp - ow` trailing columns of each row are scratch. Output channels are
// processed four at a time so every input segment is loaded once per block.

const OC_BLOCK: usize = 4;

fn axpy4(y: &mut [f32], a: [f32; 4], x: [&[f32]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] += a[0] * x0[i] + a[1] * x1[i] + a[2] * x2[i] + a[3] * x3[i];
    }
}

fn scatter4(y: [&mut [f32]; 4], a: [f32; 4], x: &[f32]) {
    let n = x.len();
    let [y0, y1, y2, y3] = y;
    let (y0, y1, y2, y3) = (&mut y0[..n], &mut y1[..n], &mut y2[..n], &mut y3[..n]);
    for i in 0..n {
        let v = x[i];
        y0[i] += a[0] * v;
        y1[i] += a[1] * v;
        y2[i] += a[2] * v;
        y3[i] += a[3] * v;
    }
}

fn split4(buf: &mut [f32], len: usize) -> [&mut [f32]; 4] {
    let (a, rest) = buf.split_at_mut(len);
    let (b, rest) = rest.split_at_mut(len);
    let (c, d) = rest.split_at_mut(len);
    [a, b, c, &mut d[..len]]
}

fn forward_unit_stride(d: &Dims, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (opg, ipg, k) = (d.out_per_group(), d.in_per_group(), d.k);
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let (span, pitch) = ((d.oh - 1) * wp + d.ow, d.oh * wp);
    let xp = pad_planes(d, x);
    let oplane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.out_c * oplane];
    let mut acc = vec![0.0f32; OC_BLOCK * pitch];
    for n in 0..d.n {
        for g in 0..d.groups {
            for oc0 in (g * opg..(g + 1) * opg).step_by(OC_BLOCK) {
                let b = OC_BLOCK.min((g + 1) * opg - oc0);
                for j in 0..b {
                    acc[j * pitch..(j + 1) * pitch].fill(bias.map_or(0.0, |v| v[oc0 + j]));
                }
                for icg in 0..ipg {
                    let base = (n * d.in_c + g * ipg + icg) * hp * wp;
                    for ky in 0..k {
                        for kx in 0..k {
                            let s = base + ky * wp + kx;
                            let seg = &xp[s..s + span];
                            let wt = |j: usize| w[((oc0 + j) * ipg + icg) * k * k + ky * k + kx];
                            if b == OC_BLOCK {
                                scatter4(split4(&mut acc, pitch), [wt(0), wt(1), wt(2), wt(3)], seg);
                            } else {
                                for j in 0..b {
                                    axpy(&mut acc[j * pitch..j * pitch + span], wt(j), seg);
                                }
                            }
                        }
                    }
                }
                for j in 0..b {
                    let obase = (n * d.out_c + oc0 + j) * oplane;
                    for oy in 0..d.oh {
                        let src = j * pitch + oy * wp;
                        out[obase + oy * d.ow..obase + (oy + 1) * d.ow].copy_from_slice(&acc[src..src + d.ow]);
                    }
                }
            }
        }
    }
    out
}

fn backward_unit_stride(d: &Dims, x: &[f32], w: &[f32], go: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (opg, ipg, k) = (d.out_per_group(), d.in_per_group(), d.k);
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let (span, pitch) = ((d.oh - 1) * wp + d.ow, d.oh * wp);
    let xp = pad_planes(d, x);
    let mut gxp = vec![0.0f32; xp.len()];
    let mut gw = vec![0.0f32; w.len()];
    let oplane = d.oh * d.ow;
    // scratch columns stay zero so they contribute nothing
    let mut gop = vec![0.0f32; OC_BLOCK * pitch];
    for n in 0..d.n {
        for g in 0..d.groups {
            for oc0 in (g * opg..(g + 1) * opg).step_by(OC_BLOCK) {
                let b = OC_BLOCK.min((g + 1) * opg - oc0);
                for j in 0..b {
                    let obase = (n * d.out_c + oc0 + j) * oplane;
                    for oy in 0..d.oh {
                        let dst = j * pitch + oy * wp;
                        gop[dst..dst + d.ow].copy_from_slice(&go[obase + oy * d.ow..obase + (oy + 1) * d.ow]);
                    }
                }
                for icg in 0..ipg {
                    let base = (n * d.in_c + g * ipg + icg) * hp * wp;
                    for ky in 0..k {
                        for kx in 0..k {
                            let s = base + ky * wp + kx;
                            let widx = |j: usize| ((oc0 + j) * ipg + icg) * k * k + ky * k + kx;
                            for j in 0..b {
                                gw[widx(j)] += dot(&gop[j * pitch..j * pitch + span], &xp[s..s + span]);
                            }
                            let seg = &mut gxp[s..s + span];
                            if b == OC_BLOCK {
                                let gs = [0, 1, 2, 3].map(|j| &gop[j * pitch..j * pitch + span]);
                                axpy4(seg, [0, 1, 2, 3].map(|j| w[widx(j)]), gs);
                            } else {
                                for j in 0..b {
                                    axpy(seg, w[widx(j)], &gop[j * pitch..j * pitch + span]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut gx = vec![0.0f32; x.len()];
    for (dst, src) in gx.chunks_exact_mut(d.h * d.w).zip(gxp.chunks_exact(hp * wp)) {
        for (y, row) in dst.chunks_exact_mut(d.w).enumerate() {
            let start = (y + d.pad) * wp + d.pad;
            row.copy_from_slice(&src[start..start + d.w]);
        }
    }
    (gx, gw)
}

/// 2-d convolution. `weight` is (out_c, in_c/groups, k, k); `bias`, when
/// given, holds out_c values in any shape.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), weight.value());
    let d = dims(xv.shape(), wv.shape(), geom)?;
    let bv = bias.map(|b| b.value());
    if let Some(b) = &bv {
        if b.numel() != d.out_c {
            return Err(Error::shape(format!("conv2d: bias has {} values for {} outputs", b.numel(), d.out_c)));
        }
    }
    let data = forward(&d, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
    let out = Tensor::from_vec(Shape::new(d.n, d.out_c, d.oh, d.ow)?, data)?;
    let tape = x.tape();
    tape.add_macs(d.macs());
    let op = Conv2dBackward { dims: d, has_bias: bias.is_some() };
    Ok(match bias {
        Some(b) => tape.record(out, &[x, weight, b], op),
        None => tape.record(out, &[x, weight], op),
    })
}

/// Multiply-accumulate count of one convolution: output elements times
/// `in_c/groups * k * k`.
pub fn conv_macs(out: Shape, in_c: usize, groups: usize, k: usize) -> u64 {
    out.numel() as u64 * (in_c / groups * k * k) as u64
}
