// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TinyLm, TokenId};
use crate::{Error, Result};

/// Adam hyperparameters for next-token training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak (cosine schedule).
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 8,
            seq_len: 32,
            seed: 0,
            warmup_steps: 20,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyLm,
    /// Mean batch loss (nats per token) for every step.
    pub losses: Vec<f64>,
}

impl TrainConfig {
    fn lr_at(&self, step: usize, steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let cosine = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Trains a copy of `model` with Adam on random windows of `corpus`.
///
/// Each step draws `batch_size` windows of `seq_len + 1` tokens from a
/// ChaCha8 stream seeded with `config.seed`, so a run is fully reproducible.
pub fn train(model: &TinyLm, corpus: &[TokenId], steps: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.seq_len == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("seq_len and batch_size must be positive"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("learning rate must be positive"));
    }
    if config.seq_len > model.config.max_input_len() {
        return Err(Error::InvalidConfig("seq_len exceeds the model context"));
    }
    let window = config.seq_len + 1;
    if corpus.len() < window {
        return Err(Error::CorpusTooSmall { len: corpus.len(), min: window });
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut first_moment = TinyLm::zeros(model.config.clone())?;
    first_moment.zero_gains();
    let mut second_moment = first_moment.clone();
    let mut losses = Vec::with_capacity(steps);
    let last_start = corpus.len() - window;

    for step in 0..steps {
        let mut grads = first_moment.clone();
        for g in grads.tensors_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut loss = 0.0;
        let inv_batch = 1.0 / config.batch_size as f64;
        for _ in 0..config.batch_size {
            let start = rng.random_range(0..=last_start);
            loss += model.accumulate_gradients(&corpus[start..start + window], inv_batch, &mut grads)? * inv_batch;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        losses.push(loss);

        let mut clip = 1.0;
        if config.grad_clip > 0.0 {
            let norm_sq: f64 = grads.tensors_mut().iter().flat_map(|t| t.iter()).map(|g| g * g).sum();
            let norm = libm::sqrt(norm_sq);
            if norm > config.grad_clip {
                clip = config.grad_clip / norm;
            }
        }
        let lr = config.lr_at(step, steps);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
        let params = model.tensors_mut();
        let gs = grads.tensors_mut();
        let m1 = first_moment.tensors_mut();
        let m2 = second_moment.tensors_mut();
        for (((p, g), a), b) in params.into_iter().zip(gs).zip(m1).zip(m2) {
            for i in 0..p.len() {
                let gi = g[i] * clip;
                a[i] = config.beta1 * a[i] + (1.0 - config.beta1) * gi;
                b[i] = config.beta2 * b[i] + (1.0 - config.beta2) * gi * gi;
                let update = (a[i] / bc1) / (libm::sqrt(b[i] / bc2) + config.adam_eps);
                p[i] -= lr * update;
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Mean of the first and last `fraction` of a loss curve.
pub fn head_tail_means(losses: &[f64], fraction: f64) -> Option<(f64, f64)> {
    let n = ((losses.len() as f64 * fraction) as usize).max(1);
    if losses.len() < 2 * n {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..n]), mean(&losses[losses.len() - n..])))
}
