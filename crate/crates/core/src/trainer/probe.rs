use serde::{Deserialize, Serialize};

use crate::eval::{latent_stats, perplexity, AU_THRESHOLD};
use crate::network::{Model, ModelError};
use crate::objective::{Strategy, TrainingExample};

use super::{train, Result, RunRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub strategy: Strategy,
    pub ppl: f64,
    pub kl_cost: f64,
    pub active_units: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
    pub records: Vec<RunRecord>,
    /// Final model of each strategy, in row order.
    pub models: Vec<Model>,
}

impl ProbeOutcome {
    pub fn row(&self, strategy: Strategy) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn model(&self, strategy: Strategy) -> Option<&Model> {
        self.rows.iter().position(|r| r.strategy == strategy).map(|i| &self.models[i])
    }

    /// Aligned text table with one row per strategy.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}{:>12}{:>12}{:>6}\n", "Method", "PPL", "KL cost", "AU");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12}{:>12.3}{:>12.4}{:>6}\n",
                r.strategy.name(),
                r.ppl,
                r.kl_cost,
                r.active_units
            ));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "ppl", "kl_cost", "au", "seconds", "seed"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.strategy.name().to_string(),
                format!("{:e}", r.ppl),
                format!("{:e}", r.kl_cost),
                r.active_units.to_string(),
                format!("{:.3}", r.seconds),
                self.seed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Per-step training KL of every strategy, long format.
    pub fn kl_curves_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "step", "kl_zp"]).expect("in-memory write");
        for (row, rec) in self.rows.iter().zip(&self.records) {
            for s in &rec.steps {
                w.write_record([row.strategy.name().to_string(), s.step.to_string(), format!("{:e}", s.loss.kl_zp)])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Trains one copy of `initial` per strategy under identical data order and
/// seeds, then scores each final model on `dev_set`.
pub fn probe_compare(
    initial: &Model,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    base: &TrainConfig,
    strategies: &[Strategy],
    on_done: &mut dyn FnMut(&ProbeRow),
) -> Result<ProbeOutcome> {
    if strategies.is_empty() {
        return Err(ModelError::Config("probe needs at least one strategy".into()).into());
    }
    if dev_set.len() < 2 {
        return Err(ModelError::Contract("probe needs at least two development examples".into()).into());
    }
    let mut out = ProbeOutcome {
        seed: base.seed,
        rows: Vec::new(),
        records: Vec::new(),
        models: Vec::new(),
    };
    for &strategy in strategies {
        let mut config = base.clone();
        config.schedule.strategy = strategy;
        let run = train(initial.clone(), train_set, &[], &config, &mut |_| {})?;
        let ppl = perplexity(&run.model, dev_set)?;
        let stats = latent_stats(&run.model, dev_set, AU_THRESHOLD)?;
        let row = ProbeRow {
            strategy,
            ppl,
            kl_cost: stats.kl_cost,
            active_units: stats.active_units,
            seconds: run.record.wall_clock_secs,
        };
        on_done(&row);
        out.rows.push(row);
        out.records.push(run.record);
        out.models.push(run.model);
    }
    Ok(out)
}
