//! Procedural denoising pairs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A generated pair plus the pre-clamp noise that was added.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub noise: Vec<f32>,
}

/// Smooth image in [0, 1]: a linear ramp plus a few Gaussian bumps per batch
/// element. Bump geometry is shared by all channels, amplitudes are not.
pub fn synth_clean<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let (h, w) = (shape.h, shape.w);
    let coord = |i: usize, len: usize| if len > 1 { i as f32 / (len - 1) as f32 } else { 0.5 };
    for n in 0..shape.n {
        let bumps: Vec<(f32, f32, f32)> = (0..rng.gen_range(2..=5))
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.3)))
            .collect();
        for c in 0..shape.c {
            let base: f32 = rng.gen_range(0.25..0.75);
            let (gx, gy): (f32, f32) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let amps: Vec<f32> = bumps.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (coord(x, w), coord(y, h));
                    let mut val = base + gx * (u - 0.5) + gy * (v - 0.5);
                    for (&(cx, cy, s), a) in bumps.iter().zip(&amps) {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        val += a * (-d2 / (2.0 * s * s)).exp();
                    }
                    let i = shape.index(n, c, y, x);
                    out.data_mut()[i] = val.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// `noisy = clamp(clean + N(0, sigma^2), 0, 1)`.
pub fn synth_pair_detailed<R: Rng + ?Sized>(rng: &mut R, shape: Shape, sigma: f32) -> Result<SynthPair> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be finite and non-negative, got {sigma}")));
    }
    let clean = synth_clean(rng, shape);
    let noise: Vec<f32> = if sigma == 0.0 {
        vec![0.0; shape.numel()]
    } else {
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        (0..shape.numel()).map(|_| dist.sample(rng)).collect()
    };
    let noisy = clean.data().iter().zip(&noise).map(|(c, e)| (c + e).clamp(0.0, 1.0)).collect();
    Ok(SynthPair { noisy: Tensor::from_vec(shape, noisy)?, clean, noise })
}

/// `(noisy, clean)`.
pub fn synth_pair<R: Rng + ?Sized>(rng: &mut R, shape: Shape, sigma: f32) -> Result<(Tensor, Tensor)> {
    let p = synth_pair_detailed(rng, shape, sigma)?;
    Ok((p.noisy, p.clean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (noisy, clean) = synth_pair(&mut rng, Shape::new(2, 3, 16, 16).unwrap(), 0.0).unwrap();
        assert_eq!(noisy.data(), clean.data());
        assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = synth_pair_detailed(&mut rng, Shape::new(4, 1, 500, 500).unwrap(), 0.1).unwrap();
        assert_eq!(p.noise.len(), 1_000_000);
        let n = p.noise.len() as f64;
        let mean = p.noise.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (p.noise.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.01, "{std}");
    }

    #[test]
    fn deterministic_under_seed() {
        let s = Shape::new(1, 1, 8, 8).unwrap();
        let a = synth_pair(&mut ChaCha8Rng::seed_from_u64(7), s, 0.1).unwrap();
        let b = synth_pair(&mut ChaCha8Rng::seed_from_u64(7), s, 0.1).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn rejects_negative_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_pair(&mut rng, Shape::new(1, 1, 4, 4).unwrap(), -0.1).is_err());
    }
}
