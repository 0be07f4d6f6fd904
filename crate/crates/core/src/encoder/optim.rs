//! Adam and the masked-LM training loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{to_storage, EncoderState};
use crate::corpus::MaskedExample;
use crate::{seed, Error, Result};

/// Examples per gradient work unit. Partial gradients are summed in unit
/// order, so results do not depend on the number of threads.
const CHUNK: usize = 4;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Update `params` in place; results are rounded to storage precision.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = to_storage(params[i] - lr * mhat / (vhat.sqrt() + self.epsilon));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of steps spent warming the learning rate up linearly.
    pub warmup_fraction: f64,
    /// Decay the learning rate linearly to zero after warmup.
    pub linear_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_fraction: 0.01,
            linear_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        if self.linear_decay && self.steps > warmup {
            let remaining = (self.steps - step) as f64 / (self.steps - warmup) as f64;
            return self.learning_rate * remaining;
        }
        self.learning_rate
    }
}

/// Train the masked-LM objective in place and return the per-step mean loss.
///
/// Examples are visited in a seeded shuffled order, epoch after epoch. The
/// loss of a step is the mean cross-entropy over every masked position in
/// its batch.
pub fn train_mlm(state: &mut EncoderState, examples: &[MaskedExample], config: &TrainConfig) -> Result<Vec<f64>> {
    if config.steps == 0 {
        return Ok(Vec::new());
    }
    if examples.is_empty() {
        return Err(Error::input("no training examples"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    for ex in examples {
        state.check_example(ex)?;
    }

    let mut adam = Adam::new(state.params.len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = shuffled(examples.len(), config.seed, epoch);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let masked: usize = batch.iter().map(|&i| examples[i].mask_positions.len()).sum();
        if masked == 0 {
            trace.push(0.0);
            continue;
        }
        let scale = 1.0 / masked as f64;
        let (loss, grads) = batch_gradients(state, examples, &batch, scale, config.seed, step as u64);
        let mean = loss * scale;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: mean });
        }
        trace.push(mean);
        adam.step(&mut state.params, &grads, config.learning_rate_at(step));
        state.step_count += 1;
    }
    Ok(trace)
}

fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "mlm-order", &[epoch]));
    order
}

fn batch_gradients(
    state: &EncoderState,
    examples: &[MaskedExample],
    batch: &[usize],
    scale: f64,
    seed: u64,
    step: u64,
) -> (f64, Vec<f64>) {
    let n = state.params.len();
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = vec![0.0; n];
            let mut loss = 0.0;
            for (k, &i) in chunk.iter().enumerate() {
                let slot = (c * CHUNK + k) as u64;
                let mut rng = seed::rng(seed, "mlm-dropout", &[step, slot]);
                loss += state.mlm_example(&examples[i], Some(&mut rng), Some((&mut grads, scale))).0;
            }
            (loss, grads)
        })
        .collect();
    let mut total = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    (loss, total)
}
