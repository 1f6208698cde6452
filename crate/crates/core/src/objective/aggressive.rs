use serde::{Deserialize, Serialize};

use crate::network::{Model, Result};
use crate::tensor::Graph;
use crate::trainer::{apply_update, Adam};

use super::{batch_loss, BatchNoise, LossBreakdown, Terms, TrainingExample};

/// Inner loop stops once one encoder update improves the batch loss by less
/// than this.
pub const AGGRESSIVE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggressiveReport {
    pub inner_steps: usize,
    /// Loss of the forward pass used for the joint update.
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
}

/// Recognition-only updates on one batch until they stop paying off or
/// `cap` is reached, then a single joint update of every parameter.
pub fn aggressive_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TrainingExample],
    noise: &BatchNoise,
    terms: Terms,
    cap: usize,
    clip_norm: f64,
) -> Result<AggressiveReport> {
    let cap = cap.max(1);
    let encoder = model.recognition_params();
    let mut inner = 0;
    let mut previous: Option<f64> = None;
    loop {
        let mut g = Graph::new();
        let out = batch_loss(&mut g, model, batch, noise, terms)?;
        let current = out.breakdown.total;
        let converged = previous.is_some_and(|p| p - current < AGGRESSIVE_TOLERANCE);
        g.backward(out.loss)?;
        if converged || inner == cap {
            let grad_norm = apply_update(&g, model, adam, clip_norm, None);
            return Ok(AggressiveReport {
                inner_steps: inner,
                breakdown: out.breakdown,
                grad_norm,
            });
        }
        apply_update(&g, model, adam, clip_norm, Some(&encoder));
        inner += 1;
        previous = Some(current);
    }
}
