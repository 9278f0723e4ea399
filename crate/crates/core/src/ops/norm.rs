//! Channel-wise layer normalisation and global response normalisation.

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Var};
use crate::tensor::{Shape, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-6;
pub const GRN_EPS: f32 = 1e-6;

fn check_vector(name: &str, v: &Tensor, c: usize) -> Result<()> {
    if v.numel() != c {
        return Err(Error::shape(format!("{name}: parameter has {} values for {c} channels", v.numel())));
    }
    Ok(())
}

struct LayerNormBackward {
    eps: f32,
}

/// Per-position normalised values and inverse std, recomputed identically in
/// forward and backward.
fn layer_norm_stats(x: &[f32], s: Shape, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let plane = s.plane();
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; s.n * plane];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let mean = (0..s.c).map(|c| x[idx(c)]).sum::<f32>() / s.c as f32;
            let var = (0..s.c).map(|c| (x[idx(c)] - mean).powi(2)).sum::<f32>() / s.c as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[n * plane + p] = istd;
            for c in 0..s.c {
                xhat[idx(c)] = (x[idx(c)] - mean) * istd;
            }
        }
    }
    (xhat, inv_std)
}

impl Backward for LayerNormBackward {
    fn name(&self) -> &'static str {
        "layer_norm_channelwise"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let x = &ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let s = x.shape();
        let plane = s.plane();
        let (xhat, inv_std) = layer_norm_stats(x.data(), s, self.eps);
        let go = ctx.grad_out;
        let mut gx = vec![0.0f32; x.numel()];
        let mut gg = vec![0.0f32; s.c];
        let mut gb = vec![0.0f32; s.c];
        let cf = s.c as f32;
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let mut mean_d = 0.0f32;
                let mut mean_dx = 0.0f32;
                for c in 0..s.c {
                    let i = idx(c);
                    let d = go[i] * gamma[c];
                    mean_d += d;
                    mean_dx += d * xhat[i];
                    gg[c] += go[i] * xhat[i];
                    gb[c] += go[i];
                }
                mean_d /= cf;
                mean_dx /= cf;
                let istd = inv_std[n * plane + p];
                for (c, &g) in gamma.iter().enumerate() {
                    let i = idx(c);
                    gx[i] = istd * (go[i] * g - mean_d - xhat[i] * mean_dx);
                }
            }
        }
        Ok(vec![Some(gx), Some(gg), Some(gb)])
    }
}

/// Normalises across channels at every spatial position, then applies the
/// per-channel affine `gamma`, `beta`.
pub fn layer_norm_channelwise<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f32) -> Result<Var<'t>> {
    if eps <= 0.0 {
        return Err(Error::config("layer norm epsilon must be positive"));
    }
    let xv = x.value();
    let s = xv.shape();
    let (g, b) = (gamma.value(), beta.value());
    check_vector("layer_norm_channelwise gamma", &g, s.c)?;
    check_vector("layer_norm_channelwise beta", &b, s.c)?;
    let (mut y, _) = layer_norm_stats(xv.data(), s, eps);
    let plane = s.plane();
    for (i, v) in y.iter_mut().enumerate() {
        let c = (i / plane) % s.c;
        *v = *v * g.data()[c] + b.data()[c];
    }
    let out = Tensor::from_vec(s, y)?;
    Ok(x.tape().record(out, &[x, gamma, beta], LayerNormBackward { eps }))
}

struct GrnBackward {
    eps: f32,
}

/// Per-(n, c) L2 norms over space and the divisive normaliser `G / (mean_c G + eps)`.
fn grn_stats(x: &[f32], s: Shape, eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane = s.plane();
    let norms: Vec<f32> = x.chunks_exact(plane).map(|ch| ch.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
    let mut denom = vec![0.0f32; s.n];
    let mut scale = vec![0.0f32; s.n * s.c];
    for n in 0..s.n {
        let m = norms[n * s.c..(n + 1) * s.c].iter().sum::<f32>() / s.c as f32;
        denom[n] = m + eps;
        for c in 0..s.c {
            scale[n * s.c + c] = norms[n * s.c + c] / denom[n];
        }
    }
    (norms, denom, scale)
}

impl Backward for GrnBackward {
    fn name(&self) -> &'static str {
        "grn"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let xt = &ctx.inputs[0];
        let x = xt.data();
        let gamma = ctx.inputs[1].data();
        let s = xt.shape();
        let plane = s.plane();
        let (norms, denom, scale) = grn_stats(x, s, self.eps);
        let go = ctx.grad_out;
        let mut gx = vec![0.0f32; x.len()];
        let mut gg = vec![0.0f32; s.c];
        let mut gb = vec![0.0f32; s.c];
        for n in 0..s.n {
            // d loss / d scale_c
            let mut dscale = vec![0.0f32; s.c];
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let sc = scale[n * s.c + c];
                let mut gx_dot = 0.0f32;
                let mut gsum = 0.0f32;
                for p in 0..plane {
                    let i = base + p;
                    gx_dot += go[i] * x[i];
                    gsum += go[i];
                    gx[i] = go[i] * (1.0 + gamma[c] * sc);
                }
                gg[c] += gx_dot * sc;
                gb[c] += gsum;
                dscale[c] = gamma[c] * gx_dot;
            }
            // scale_c = G_c / (mean(G) + eps)
            let d = denom[n];
            let cross: f32 = (0..s.c).map(|c| dscale[c] * norms[n * s.c + c]).sum::<f32>() / (d * d * s.c as f32);
            for c in 0..s.c {
                let g_norm = norms[n * s.c + c];
                if g_norm == 0.0 {
                    continue;
                }
                let dnorm = dscale[c] / d - cross;
                let base = (n * s.c + c) * plane;
                for p in 0..plane {
                    gx[base + p] += dnorm * x[base + p] / g_norm;
                }
            }
        }
        Ok(vec![Some(gx), Some(gg), Some(gb)])
    }
}

/// Global response normalisation:
/// `y = gamma_c * x * G_c / (mean_c G + eps) + beta_c + x`, with `G_c` the
/// spatial L2 norm of channel `c`.
pub fn grn<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f32) -> Result<Var<'t>> {
    let xv = x.value();
    let s = xv.shape();
    let (g, b) = (gamma.value(), beta.value());
    check_vector("grn gamma", &g, s.c)?;
    check_vector("grn beta", &b, s.c)?;
    let (_, _, scale) = grn_stats(xv.data(), s, eps);
    let plane = s.plane();
    let data = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let nc = i / plane;
            let c = nc % s.c;
            g.data()[c] * v * scale[nc] + b.data()[c] + v
        })
        .collect();
    let out = Tensor::from_vec(s, data)?;
    Ok(x.tape().record(out, &[x, gamma, beta], GrnBackward { eps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn vec_param(tape: &Tape, c: usize, v: f32) -> Var<'_> {
        tape.constant(Tensor::full(Shape::vector(c).unwrap(), v))
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 4, 3, 3).unwrap(), 2.5));
        let y = layer_norm_channelwise(x, vec_param(&tape, 4, 1.0), vec_param(&tape, 4, 0.0), LAYER_NORM_EPS).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn per_position_mean_is_zero() {
        let tape = Tape::new();
        let s = Shape::new(2, 5, 2, 3).unwrap();
        let data = (0..s.numel()).map(|i| ((i * 37) % 11) as f32 * 0.3 - 1.0).collect();
        let x = tape.constant(Tensor::from_vec(s, data).unwrap());
        let y = layer_norm_channelwise(x, vec_param(&tape, 5, 1.0), vec_param(&tape, 5, 0.0), LAYER_NORM_EPS).unwrap();
        let y = y.value();
        for n in 0..2 {
            for py in 0..2 {
                for px in 0..3 {
                    let m: f32 = (0..5).map(|c| y.at(n, c, py, px)).sum::<f32>() / 5.0;
                    assert!(m.abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn norm_parameter_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 4, 2, 2).unwrap()));
        assert!(layer_norm_channelwise(x, vec_param(&tape, 3, 1.0), vec_param(&tape, 4, 0.0), 1e-6).is_err());
        assert!(grn(x, vec_param(&tape, 4, 0.0), vec_param(&tape, 2, 0.0), 1e-6).is_err());
        assert!(layer_norm_channelwise(x, vec_param(&tape, 4, 1.0), vec_param(&tape, 4, 0.0), 0.0).is_err());
    }

    #[test]
    fn zero_grn_is_identity() {
        let tape = Tape::new();
        let s = Shape::new(1, 3, 2, 2).unwrap();
        let x = tape.constant(Tensor::from_vec(s, (0..12).map(|v| v as f32 - 4.0).collect()).unwrap());
        let y = grn(x, vec_param(&tape, 3, 0.0), vec_param(&tape, 3, 0.0), GRN_EPS).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn single_channel_grn_scales_by_gamma_plus_one() {
        let tape = Tape::new();
        let s = Shape::new(1, 1, 2, 2).unwrap();
        let x = tape.constant(Tensor::from_vec(s, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = grn(x, vec_param(&tape, 1, 0.5), vec_param(&tape, 1, 0.0), GRN_EPS).unwrap();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - 1.5 * b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
