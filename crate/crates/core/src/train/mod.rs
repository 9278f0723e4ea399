//! Desk-scale denoising training on procedural data.

mod checkpoint;
mod data;
mod optim;

pub use checkpoint::{
    load_checkpoint, manifest_diff, read_manifest, save_checkpoint, Manifest, ManifestEntry, MANIFEST,
};
pub use data::{synth_clean, synth_pair, synth_pair_detailed, SynthPair};
pub use optim::{cosine_lr, Adam};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ModelConfig, SkipMode, UNet};
use crate::basic::{affine, ln, mean, mul, sub};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Added to the MSE inside the loss so it stays finite at zero error.
pub const PSNR_LOSS_EPS: f32 = 1e-8;

/// `-PSNR(pred, target)` in dB, differentiable.
pub fn psnr_loss<'t>(pred: Var<'t>, target: Var<'t>, max_val: f32) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("psnr_loss: {} vs {}", pred.shape(), target.shape())));
    }
    let d = sub(pred, target)?;
    let mse = affine(mean(mul(d, d)?), 1.0, PSNR_LOSS_EPS);
    let db = 10.0 / std::f32::consts::LN_10;
    Ok(affine(ln(mse)?, db, -20.0 * max_val.log10()))
}

fn default_iterations() -> usize {
    200
}
fn default_batch() -> usize {
    4
}
fn default_patch() -> usize {
    32
}
fn default_lr_init() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-7
}
fn default_beta() -> f64 {
    0.9
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_sigma() -> f32 {
    0.1
}
fn default_val_every() -> usize {
    50
}
fn default_val_pairs() -> usize {
    16
}
fn default_val_seed() -> u64 {
    0x7a11_da7e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Square patch side for training and validation.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_beta")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f32,
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default = "default_val_pairs")]
    pub val_pairs: usize,
    /// Seed of the held-out set; independent of `seed` so runs share it.
    #[serde(default = "default_val_seed")]
    pub val_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: default_iterations(),
            batch_size: default_batch(),
            patch_size: default_patch(),
            lr_init: default_lr_init(),
            lr_min: default_lr_min(),
            adam_beta1: default_beta(),
            adam_beta2: default_beta(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            seed: 0,
            noise_sigma: default_sigma(),
            val_every: default_val_every(),
            val_pairs: default_val_pairs(),
            val_seed: default_val_seed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.iterations == 0 || self.batch_size == 0 || self.val_every == 0 || self.val_pairs == 0 {
            return fail("iterations, batch_size, val_every and val_pairs must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return fail(format!("need 0 <= lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return fail("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        Ok(())
    }

    fn patch_shape(&self, n: usize, channels: usize) -> Result<Shape> {
        Shape::new(n, channels, self.patch_size, self.patch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamSet,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

pub struct TrainRun {
    pub model: UNet,
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
    /// Mean PSNR of the noisy validation inputs against their targets.
    pub baseline_psnr: f64,
}

impl TrainRun {
    pub fn final_val_psnr(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.val_psnr)
    }
}

/// The fixed held-out pairs as one `(noisy, clean)` batch.
pub fn validation_set(tcfg: &TrainConfig, channels: usize) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.val_seed);
    synth_pair(&mut rng, tcfg.patch_shape(tcfg.val_pairs, channels)?, tcfg.noise_sigma)
}

fn batch_item(t: &Tensor, i: usize) -> Tensor {
    let s = t.shape();
    let per = s.c * s.plane();
    let shape = Shape { n: 1, ..s };
    Tensor::from_vec(shape, t.data()[i * per..(i + 1) * per].to_vec()).expect("slice matches shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

/// Per-image mean of `(psnr, ssim)` between `pred` and `target` batches.
fn batch_quality(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let n = pred.shape().n;
    let (mut p, mut s) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (batch_item(pred, i), batch_item(target, i));
        p += psnr(&a, &b, 1.0)?;
        s += ssim(&a, &b, 1.0)?;
    }
    Ok((p / n as f64, s / n as f64))
}

pub fn predict(model: &UNet, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let y = model.forward(&tape, params, tape.constant(input.clone()))?;
    let out = (*y.value()).clone();
    Ok(out)
}

pub fn evaluate(model: &UNet, params: &ParamSet, noisy: &Tensor, clean: &Tensor) -> Result<EvalReport> {
    let pred = predict(model, params, noisy)?;
    if !pred.is_finite() {
        return Err(Error::Numeric("model produced non-finite output".into()));
    }
    let (psnr, ssim) = batch_quality(&pred, clean)?;
    let (baseline_psnr, baseline_ssim) = batch_quality(noisy, clean)?;
    Ok(EvalReport { psnr, ssim, baseline_psnr, baseline_ssim })
}

fn val_psnr(model: &UNet, params: &ParamSet, noisy: &Tensor, clean: &Tensor) -> Result<f64> {
    let pred = predict(model, params, noisy)?;
    let n = pred.shape().n;
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&batch_item(&pred, i), &batch_item(clean, i), 1.0)?;
    }
    Ok(total / n as f64)
}

pub fn train(cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainRun> {
    train_with(cfg, tcfg, |_| {})
}

/// Trains from a fresh initialisation seeded by `tcfg.seed`; `on_row` sees
/// every metrics row as it is produced.
pub fn train_with(cfg: &ModelConfig, tcfg: &TrainConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainRun> {
    tcfg.validate()?;
    cfg.validate()?;
    cfg.validate_input(tcfg.patch_shape(1, cfg.in_channels)?)?;
    let (model, params) = UNet::init(cfg, tcfg.seed)?;
    let adam = Adam::new(&params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay);
    // Separate stream from the initialisation.
    let rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = TrainState { step: 0, params, adam, rng };
    let (val_noisy, val_clean) = validation_set(tcfg, cfg.in_channels)?;
    let baseline_psnr = {
        let mut t = 0.0;
        for i in 0..tcfg.val_pairs {
            t += psnr(&batch_item(&val_noisy, i), &batch_item(&val_clean, i), 1.0)?;
        }
        t / tcfg.val_pairs as f64
    };
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    let batch_shape = tcfg.patch_shape(tcfg.batch_size, cfg.in_channels)?;
    while state.step < tcfg.iterations {
        let lr = cosine_lr(state.step, tcfg.iterations, tcfg.lr_init, tcfg.lr_min);
        let (noisy, clean) = synth_pair(&mut state.rng, batch_shape, tcfg.noise_sigma)?;
        let tape = Tape::new();
        let pred = model.forward(&tape, &state.params, tape.constant(noisy))?;
        let loss = psnr_loss(pred, tape.constant(clean), 1.0)?;
        let loss_value = loss.value().item()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss_value} at step {}", state.step + 1)));
        }
        state.params.zero_grad();
        tape.backward(loss)?.accumulate_into(&mut state.params)?;
        state.adam.step(&mut state.params, lr)?;
        state.step += 1;
        loss_sum += loss_value;
        loss_count += 1;
        if state.step.is_multiple_of(tcfg.val_every) || state.step == tcfg.iterations {
            let v = val_psnr(&model, &state.params, &val_noisy, &val_clean)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation PSNR at step {}", state.step)));
            }
            let row = MetricsRow { step: state.step, lr, train_loss: loss_sum / loss_count as f64, val_psnr: v };
            on_row(&row);
            history.push(row);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainRun { model, state, history, baseline_psnr })
}

/// Worker count for parallel runs: `UNETMM_THREADS` when set to a positive
/// integer, otherwise the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("UNETMM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub skip_mode: String,
    pub seed: u64,
    pub baseline_psnr: f64,
    pub val_psnr: f64,
}

/// Trains every `(mode, seed)` pair of `base` independently; runs are
/// spread over [`worker_threads`] threads and returned in input order.
pub fn run_ablation(
    base: &ModelConfig,
    modes: &[SkipMode],
    seeds: &[u64],
    tcfg: &TrainConfig,
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(SkipMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| {
                let t = TrainConfig { seed, ..tcfg.clone() };
                let run = train(&base.with_skip_mode(mode), &t)?;
                Ok(AblationRun {
                    skip_mode: mode.to_string(),
                    seed,
                    baseline_psnr: run.baseline_psnr,
                    val_psnr: run.final_val_psnr(),
                })
            })
            .collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
