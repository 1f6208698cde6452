use serde::{Deserialize, Serialize};

use crate::network::Model;
use crate::tensor::{Graph, ParamId};

/// Parameter gradients indexed by `ParamId`; `None` for untouched tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Reads the gradients of a finished backward pass. The pinned zero row
    /// of the position table never receives gradient.
    pub fn collect(g: &Graph<f64>, model: &Model) -> Self {
        let mut slots = vec![None; model.params.len()];
        for (id, grad) in g.param_grads() {
            slots[id.0] = Some(grad.to_vec());
        }
        let d = model.config.hidden;
        if let Some(pos) = slots[model.position_table().0].as_mut() {
            pos[..d].iter_mut().for_each(|x| *x = 0.0);
        }
        Self { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Drops every gradient outside `keep`.
    pub fn restrict(&mut self, keep: &[ParamId]) {
        let mut mask = vec![false; self.slots.len()];
        keep.iter().for_each(|id| mask[id.0] = true);
        for (slot, &k) in self.slots.iter_mut().zip(&mask) {
            if !k {
                *slot = None;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.slots.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor step counters, so partial updates of a subset of
/// parameters keep correct bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.params.iter().map(|(_, _, t)| t.len()).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (i, slot) in grads.slots.iter().enumerate() {
            let Some(grad) = slot else { continue };
            self.t[i] += 1;
            let bc1 = 1.0 - beta1.powi(self.t[i] as i32);
            let bc2 = 1.0 - beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = model.params.get_mut(ParamId(i)).data_mut();
            for j in 0..grad.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Backward pass result applied to the model: gradient collection, optional
/// restriction to a parameter subset, clipping, Adam and the mixing-weight
/// projection. Returns the gradient norm before clipping.
pub fn apply_update(
    g: &Graph<f64>,
    model: &mut Model,
    adam: &mut Adam,
    clip_norm: f64,
    only: Option<&[ParamId]>,
) -> f64 {
    let mut grads = Gradients::collect(g, model);
    if let Some(keep) = only {
        grads.restrict(keep);
    }
    let norm = grads.clip(clip_norm);
    adam.step(model, &grads);
    model.project_mix_weights();
    norm
}
