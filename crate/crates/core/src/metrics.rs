//! Image-quality metrics and feature diagnostics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(max_val^2 / MSE)`, `+inf` for identical inputs.
pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    if max_val.is_nan() || max_val <= 0.0 {
        return Err(Error::Numeric(format!("psnr: max_val must be positive, got {max_val}")));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// Normalised 1-D Gaussian of odd length `size`.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Window length used for an `h x w` plane: 11, or the largest odd size that
/// fits when the image is smaller.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean local SSIM of one pair of planes.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let k = gaussian_kernel(ssim_window(h, w), SSIM_SIGMA);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

fn planes(t: &Tensor) -> impl Iterator<Item = Vec<f64>> + '_ {
    let p = t.shape().plane();
    t.data().chunks(p).map(|c| c.iter().map(|&v| v as f64).collect())
}

/// Mean local SSIM over every (batch, channel) plane, clamped to [0, 1].
pub fn ssim(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::Numeric(format!("ssim: data_range must be positive, got {data_range}")));
    }
    let s = a.shape();
    let count = (s.n * s.c) as f64;
    let total: f64 = planes(a).zip(planes(b)).map(|(pa, pb)| ssim_plane(&pa, &pb, s.h, s.w, data_range)).sum();
    Ok((total / count).clamp(0.0, 1.0))
}

/// Per-channel values gathered over the batch: `[c][n * h * w]`.
fn channels(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let p = s.plane();
    let mut out = vec![Vec::with_capacity(s.n * p); s.c];
    for (i, chunk) in t.data().chunks(p).enumerate() {
        out[i % s.c].extend(chunk.iter().map(|&v| v as f64));
    }
    out
}

/// Rescales each channel to [0, 1] over all of its positions; a constant
/// channel maps to zeros.
fn min_max(ch: &[f64]) -> Vec<f64> {
    let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        ch.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; ch.len()]
    }
}

/// Similarity between two feature maps: per-channel min-max normalisation,
/// per-channel SSIM with unit range, averaged over channels.
pub fn feature_similarity(enc: &Tensor, iem: &Tensor) -> Result<f64> {
    same_shape("feature_similarity", enc, iem)?;
    let s = enc.shape();
    let (ce, ci) = (channels(enc), channels(iem));
    let mut total = 0.0;
    for (e, i) in ce.iter().zip(&ci) {
        let (e, i) = (min_max(e), min_max(i));
        let p = s.plane();
        let per_batch: f64 =
            (0..s.n).map(|b| ssim_plane(&e[b * p..(b + 1) * p], &i[b * p..(b + 1) * p], s.h, s.w, 1.0)).sum();
        total += (per_batch / s.n as f64).clamp(0.0, 1.0);
    }
    Ok(total / s.c as f64)
}

/// Statistics of the pairwise cosine distances between channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaStats {
    pub mean: f64,
    /// Population variance; the scalar reported as representative ability.
    pub variance: f64,
    /// Channels with zero norm; their pairs use distance 1.
    pub zero_norm_channels: Vec<usize>,
}

/// `d_ij = 1 - cos(ch_i, ch_j)` for all `i < j`, row-major over pairs.
pub fn pairwise_cosine_distances(f: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let c = f.shape().c;
    if c < 2 {
        return Err(Error::shape(format!("representative ability needs at least 2 channels, got {}", f.shape())));
    }
    let ch = channels(f);
    let norms: Vec<f64> = ch.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let zero: Vec<usize> = (0..c).filter(|&i| norms[i] == 0.0).collect();
    let mut d = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in i + 1..c {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                d.push(1.0);
                continue;
            }
            let dot: f64 = ch[i].iter().zip(&ch[j]).map(|(x, y)| x * y).sum();
            d.push(1.0 - (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0));
        }
    }
    Ok((d, zero))
}

pub fn representative_ability(f: &Tensor) -> Result<RaStats> {
    let (d, zero_norm_channels) = pairwise_cosine_distances(f)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let variance = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(RaStats { mean, variance, zero_norm_channels })
}

/// One row of the encoder-vs-IEM comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiagnostics {
    pub stage: usize,
    #[serde(rename = "ssim")]
    pub ssim_to_encoder: f64,
    /// Representative ability of the IEM output.
    pub ra_mean: f64,
    pub ra_variance: f64,
}

impl FeatureDiagnostics {
    pub fn compute(stage: usize, enc: &Tensor, iem: &Tensor) -> Result<Self> {
        let ra = representative_ability(iem)?;
        Ok(FeatureDiagnostics {
            stage,
            ssim_to_encoder: feature_similarity(enc, iem)?,
            ra_mean: ra.mean,
            ra_variance: ra.variance,
        })
    }
}

/// Writes rows with a fixed header; floats use the shortest round-trip form.
pub fn write_csv_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numeric(format!("csv write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })).collect()
}
