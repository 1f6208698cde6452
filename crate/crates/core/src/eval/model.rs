use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{GaussianParams, Model, ModelError, Result};
use crate::objective::{kl_diag_gaussians, TrainingExample};
use crate::tensor::{Graph, Reduction};

use super::{active_units_of, principal_components_2};

/// Threshold on posterior-mean variance for a dimension to count as active.
pub const AU_THRESHOLD: f64 = 0.01;

fn require_examples(examples: &[TrainingExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(ModelError::Contract("evaluation corpus is empty".into()));
    }
    Ok(())
}

/// Summed response NLL and token count of one example, conditioning on the
/// prior mean and the prior fader.
pub fn response_nll(model: &Model, ex: &TrainingExample) -> Result<(f64, usize)> {
    let mut g = Graph::no_grad();
    let p = model.encode_prior_zp(&mut g, &ex.prior)?;
    let alpha = model.prior_fader(&mut g, &ex.fader, p.mu)?;
    let alpha = g.reshape(alpha, &[1])?;
    let trace = model.decode(&mut g, &ex.decoder, p.mu, alpha, Default::default())?;
    let mask = vec![true; trace.targets.len()];
    let nll = g.cross_entropy(trace.logits, &trace.targets, &mask, Reduction::Sum)?;
    Ok((g.scalar(nll), trace.targets.len()))
}

/// `exp(total response NLL / total response tokens)`.
pub fn perplexity(model: &Model, examples: &[TrainingExample]) -> Result<f64> {
    require_examples(examples)?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let (n, t) = response_nll(model, ex)?;
        nll += n;
        tokens += t;
    }
    Ok((nll / tokens as f64).exp())
}

/// Recognition and prior parameters of every example.
pub fn latent_params(
    model: &Model,
    examples: &[TrainingExample],
) -> Result<Vec<(GaussianParams<f64>, GaussianParams<f64>)>> {
    examples
        .iter()
        .map(|ex| {
            let mut g = Graph::no_grad();
            let q = model.encode_posterior_zp(&mut g, &ex.posterior)?.values(&g);
            let p = model.encode_prior_zp(&mut g, &ex.prior)?.values(&g);
            Ok((q, p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub kl_cost: f64,
    pub active_units: usize,
    pub posterior_means: Vec<Vec<f64>>,
}

pub fn latent_stats(model: &Model, examples: &[TrainingExample], threshold: f64) -> Result<LatentStats> {
    require_examples(examples)?;
    let params = latent_params(model, examples)?;
    let mut kl = 0.0;
    for (q, p) in &params {
        kl += kl_diag_gaussians(q, p)?;
    }
    let posterior_means: Vec<Vec<f64>> = params.into_iter().map(|(q, _)| q.mu).collect();
    Ok(LatentStats {
        kl_cost: kl / examples.len() as f64,
        active_units: active_units_of(&posterior_means, threshold),
        posterior_means,
    })
}

/// Mean over the corpus of `KL(q(z|profile) ‖ p(z|context))`.
pub fn kl_cost(model: &Model, examples: &[TrainingExample]) -> Result<f64> {
    Ok(latent_stats(model, examples, AU_THRESHOLD)?.kl_cost)
}

pub fn active_units(model: &Model, examples: &[TrainingExample], threshold: f64) -> Result<usize> {
    if examples.len() < 2 {
        return Err(ModelError::Contract("active units need at least two examples".into()));
    }
    Ok(latent_stats(model, examples, threshold)?.active_units)
}

/// CSV columns: `id, category, mu_1..mu_K, pc1, pc2`.
pub fn latents_csv(means: &[Vec<f64>], categories: &[Option<String>]) -> Result<String> {
    if means.len() != categories.len() {
        return Err(ModelError::Contract("one category per latent row is required".into()));
    }
    let k = means.first().map_or(0, Vec::len);
    let pcs = principal_components_2(means);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "category".to_string()];
    header.extend((1..=k).map(|d| format!("mu_{d}")));
    header.extend(["pc1".to_string(), "pc2".to_string()]);
    let io = |e: csv::Error| ModelError::Io(e.into());
    w.write_record(&header).map_err(io)?;
    for (i, (mu, pc)) in means.iter().zip(&pcs).enumerate() {
        let mut row = vec![i.to_string(), categories[i].clone().unwrap_or_default()];
        row.extend(mu.iter().map(|v| format!("{v:e}")));
        row.extend(pc.iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| ModelError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes posterior means with their top-two principal coordinates.
pub fn export_latents(model: &Model, examples: &[TrainingExample], path: &Path) -> Result<()> {
    let stats = latent_stats(model, examples, AU_THRESHOLD)?;
    let cats: Vec<Option<String>> = examples.iter().map(|e| e.category.clone()).collect();
    std::fs::write(path, latents_csv(&stats.posterior_means, &cats)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub p_distance: f64,
    pub kl_cost: f64,
    pub active_units: usize,
    pub samples: usize,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        [self.ppl, self.distinct_1, self.distinct_2, self.p_distance, self.kl_cost]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn table(&self) -> String {
        format!(
            "{:<12}{:>12}\n{:<12}{:>12.4}\n{:<12}{:>12.4}\n{:<12}{:>12.4}\n{:<12}{:>12.4}\n{:<12}{:>12.4}\n{:<12}{:>12}\n{:<12}{:>12}\n",
            "metric", "value",
            "PPL", self.ppl,
            "Distinct-1", self.distinct_1,
            "Distinct-2", self.distinct_2,
            "P.Distance", self.p_distance,
            "KL cost", self.kl_cost,
            "AU", self.active_units,
            "samples", self.samples,
        )
    }
}
