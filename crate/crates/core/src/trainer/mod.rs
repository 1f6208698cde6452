//! Optimization loop, run records and the strategy comparison harness.

mod optim;
mod probe;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{latent_stats, perplexity, AU_THRESHOLD};
use crate::network::{Model, ModelError};
use crate::objective::{
    aggressive_step, batch_loss, BatchNoise, LossBreakdown, ScheduleConfig, Strategy, Terms,
    TrainingExample,
};
use crate::tensor::{Graph, TensorError};

pub use optim::{apply_update, Adam, AdamConfig, Gradients};
pub use probe::{probe_compare, ProbeOutcome, ProbeRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {detail}")]
    Diverged {
        step: usize,
        detail: String,
        /// Parameters before the failing step.
        last_good: Box<Model>,
        record: Box<RunRecord>,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Validate on at most this many development examples.
    pub val_limit: Option<usize>,
    /// Step index of the first update, for resumed runs.
    pub start_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 30,
            seed: 11,
            schedule: ScheduleConfig::default(),
            clip_norm: 5.0,
            max_steps: None,
            val_limit: None,
            start_step: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate of the published large-model setting.
    pub fn paper() -> Self {
        Self {
            adam: AdamConfig {
                lr: 2.6e-5,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("gradient clip norm must be positive");
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Encoder-only updates run before the joint one.
    pub inner_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub last_step: usize,
    pub val_ppl: f64,
    pub kl_cost: f64,
    pub active_units: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub const METRICS_HEADER: [&'static str; 11] = [
        "step", "epoch", "recon", "kl_zp", "fader", "podi", "bow", "beta", "total", "grad_norm",
        "inner_steps",
    ];

    /// Per-step loss log as RFC-4180 CSV.
    pub fn metrics_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::METRICS_HEADER).expect("in-memory write");
        for s in &self.steps {
            let l = &s.loss;
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:e}", l.recon),
                format!("{:e}", l.kl_zp),
                format!("{:e}", l.fader),
                format!("{:e}", l.podi),
                format!("{:e}", l.bow),
                format!("{:e}", l.beta),
                format!("{:e}", l.total),
                format!("{:e}", s.grad_norm),
                s.inner_steps.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn best_val_ppl(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_ppl)
    }
}

/// What a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the epoch with the lowest validation perplexity.
    pub best: Model,
    pub record: RunRecord,
}

/// Trains `model` in place of a copy and returns the final and best models.
///
/// `on_step` sees every step record as soon as it exists.
pub fn train(
    mut model: Model,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Contract("training set is empty".into()).into());
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model, config.adam);
    let k = model.config.latent;
    let dev = &dev_set[..config.val_limit.map_or(dev_set.len(), |n| n.min(dev_set.len()))];
    let mut record = RunRecord {
        config: config.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        wall_clock_secs: 0.0,
    };
    let mut best = model.clone();
    let mut step = config.start_step;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let budget_left = |step: usize| config.max_steps.map_or(true, |m| step - config.start_step < m);

    'epochs: for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if !budget_left(step) {
                break 'epochs;
            }
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let noise = BatchNoise::draw(batch.len(), k, &mut rng);
            let terms = Terms::for_schedule(&config.schedule, step);
            let before = model.clone();
            let attempt = run_step(&mut model, &mut adam, &batch, &noise, terms, config);
            let diverged = |detail: String, record: &RunRecord| TrainError::Diverged {
                step,
                detail,
                last_good: Box::new(before.clone()),
                record: Box::new(record.clone()),
            };
            let (loss, grad_norm, inner_steps) = match attempt {
                Ok(v) => v,
                Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                    return Err(diverged(format!("non-finite value in {op}"), &record));
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.total.is_finite() || !model.params.iter().all(|(_, _, t)| t.is_finite()) {
                return Err(diverged("non-finite loss or parameters".into(), &record));
            }
            let rec = StepRecord {
                step,
                epoch,
                loss,
                grad_norm,
                inner_steps,
            };
            on_step(&rec);
            record.steps.push(rec);
            step += 1;
        }
        if !dev.is_empty() {
            let val_ppl = perplexity(&model, dev)?;
            let stats = latent_stats(&model, dev, AU_THRESHOLD)?;
            record.epochs.push(EpochRecord {
                epoch,
                last_step: step,
                val_ppl,
                kl_cost: stats.kl_cost,
                active_units: stats.active_units,
                seconds: epoch_start.elapsed().as_secs_f64(),
            });
            let improved = record.best_val_ppl().map_or(true, |b| val_ppl < b);
            if improved {
                record.best_epoch = Some(record.epochs.len() - 1);
                best = model.clone();
            }
        }
    }
    if record.best_epoch.is_none() {
        best = model.clone();
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, best, record })
}

fn run_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TrainingExample],
    noise: &BatchNoise,
    terms: Terms,
    config: &TrainConfig,
) -> std::result::Result<(LossBreakdown, f64, usize), ModelError> {
    if config.schedule.strategy == Strategy::Aggressive {
        let rep = aggressive_step(model, adam, batch, noise, terms, config.schedule.aggressive_cap, config.clip_norm)?;
        return Ok((rep.breakdown, rep.grad_norm, rep.inner_steps));
    }
    let mut g = Graph::new();
    let out = batch_loss(&mut g, model, batch, noise, terms)?;
    if !out.breakdown.total.is_finite() {
        return Ok((out.breakdown, f64::NAN, 0));
    }
    g.backward(out.loss)?;
    let norm = apply_update(&g, model, adam, config.clip_norm, None);
    Ok((out.breakdown, norm, 0))
}

#[cfg(test)]
mod tests;
