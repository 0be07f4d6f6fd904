//! Finite-difference verification of the hand-written backward pass.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::EncoderState;
use crate::corpus::MaskedExample;
use crate::{seed, Error, Result};

/// Gradients smaller than this are only sampled when a tensor has nothing larger.
const SMALL_GRADIENT: f64 = 1e-5;
const DENOMINATOR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub sampled: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstParameter {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub sampled: usize,
    pub per_tensor: Vec<TensorCheck>,
    pub worst: Option<WorstParameter>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn eval_state(state: &EncoderState) -> EncoderState {
    let mut s = state.clone();
    s.config = s.config.without_dropout();
    s
}

fn mean_loss(state: &EncoderState, ex: &MaskedExample) -> f64 {
    state.mlm_example(ex, None, None).0 / ex.mask_positions.len() as f64
}

/// Mean masked cross-entropy of `ex` and its gradient, dropout disabled.
pub fn analytic_gradients(state: &EncoderState, ex: &MaskedExample) -> Result<(f64, Vec<f64>)> {
    state.check_example(ex)?;
    if ex.mask_positions.is_empty() {
        return Err(Error::input("example has no masked positions"));
    }
    let s = eval_state(state);
    let mut grads = vec![0.0; s.params.len()];
    let scale = 1.0 / ex.mask_positions.len() as f64;
    let loss = s.mlm_example(ex, None, Some((&mut grads, scale))).0 * scale;
    Ok((loss, grads))
}

/// Compare analytic gradients with central differences on at least
/// `samples` parameters drawn from every tensor.
pub fn gradient_check(
    state: &EncoderState,
    ex: &MaskedExample,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = analytic_gradients(state, ex)?;
    compare_gradients(state, ex, &grads, epsilon, samples, seed)
}

/// Check a supplied gradient vector against central differences. Exposed so
/// that a corrupted gradient can be shown to fail.
pub fn compare_gradients(
    state: &EncoderState,
    ex: &MaskedExample,
    analytic: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    state.check_example(ex)?;
    if analytic.len() != state.params.len() {
        return Err(Error::input(format!(
            "gradient has {} entries, model has {}",
            analytic.len(),
            state.params.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let mut s = eval_state(state);
    let specs = s.layout.specs().to_vec();
    let quota = samples.div_ceil(specs.len().max(1)).max(1);
    let mut rng = seed::rng(seed, "gradcheck", &[]);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        sampled: 0,
        per_tensor: Vec::with_capacity(specs.len()),
        worst: None,
    };
    for spec in &specs {
        let mut indices: Vec<usize> = spec.range().collect();
        indices.shuffle(&mut rng);
        // Stable partition: informative (non-tiny) gradients first.
        indices.sort_by_key(|&i| analytic[i].abs() < SMALL_GRADIENT);
        let mut check = TensorCheck {
            name: spec.name.clone(),
            sampled: 0,
            max_relative_error: 0.0,
        };
        for &i in indices.iter().take(quota) {
            let original = s.params[i];
            s.params[i] = original + epsilon;
            let plus = mean_loss(&s, ex);
            s.params[i] = original - epsilon;
            let minus = mean_loss(&s, ex);
            s.params[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            check.sampled += 1;
            check.max_relative_error = check.max_relative_error.max(err);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some(WorstParameter {
                    tensor: spec.name.clone(),
                    index: i - spec.offset,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.sampled += check.sampled;
        report.per_tensor.push(check);
    }
    Ok(report)
}
