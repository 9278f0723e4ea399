//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// `lr_min + (lr_init - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        Adam { beta1, beta2, eps, weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().map(|(_, p)| p).find(|p| p.tensor.grad.is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad.take().expect("checked above");
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64 + self.weight_decay * data[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
