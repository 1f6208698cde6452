//! Training losses: the evidence lower bound, closed-form Gaussian KL,
//! posterior-discriminated regularization and the comparison strategies.

mod aggressive;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueExample, EncodedSequence, Encoder, Special, Vocab};
use crate::eval::{EmbeddingTable, KeywordExtractor};
use crate::network::{recognition_fader, GaussianParams, GaussianVars, Model, ModelError, Result};
use crate::tensor::{Graph, Reduction, Scalar, Tensor, TensorError, Var};

pub use aggressive::{aggressive_step, AggressiveReport, AGGRESSIVE_TOLERANCE};

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians<S: Scalar>(
    q: &GaussianParams<S>,
    p: &GaussianParams<S>,
) -> std::result::Result<S, TensorError> {
    let k = q.mu.len();
    if q.logvar.len() != k || p.mu.len() != k || p.logvar.len() != k {
        return Err(TensorError::Dimension {
            op: "kl_diag_gaussians",
            detail: format!(
                "q has {}/{} entries, p has {}/{}",
                q.mu.len(),
                q.logvar.len(),
                p.mu.len(),
                p.logvar.len()
            ),
        });
    }
    let half = S::lit(0.5);
    let mut total = S::zero();
    for d in 0..k {
        let diff = q.mu[d] - p.mu[d];
        let ratio = (q.logvar[d] - p.logvar[d]).exp();
        total = total + ratio + diff * diff * (-p.logvar[d]).exp() - S::one() + p.logvar[d] - q.logvar[d];
    }
    Ok((half * total).max(S::zero()))
}

/// `KL(q ‖ p)` as a scalar graph node.
pub fn kl_on_graph(g: &mut Graph<f64>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let k = g.value(q.mu).len() as f64;
    let dlv = g.sub(q.logvar, p.logvar)?;
    let ratio = g.exp(dlv)?;
    let dmu = g.sub(q.mu, p.mu)?;
    let sq = g.square(dmu)?;
    let neg_lp = g.neg(p.logvar)?;
    let inv_var = g.exp(neg_lp)?;
    let scaled = g.mul(sq, inv_var)?;
    let a = g.add(ratio, scaled)?;
    let b = g.sub(a, dlv)?;
    let s = g.sum(b)?;
    Ok(g.affine(s, 0.5, -0.5 * k)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Kla,
    Cyclic,
    Bow,
    Aggressive,
    Podi,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::Kla,
        Strategy::Cyclic,
        Strategy::Bow,
        Strategy::Aggressive,
        Strategy::Podi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Kla => "kla",
            Strategy::Cyclic => "cyclic",
            Strategy::Bow => "bow",
            Strategy::Aggressive => "aggressive",
            Strategy::Podi => "podi",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ModelError::Config(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PodiConfig {
    /// Distinction objective: pairs whose KL reaches it cost nothing.
    pub lambda: f64,
}

impl Default for PodiConfig {
    fn default() -> Self {
        Self { lambda: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    pub kla_ramp_steps: usize,
    /// Steps per annealing cycle.
    pub cycle_length: usize,
    /// Fraction of each cycle spent ramping.
    pub cycle_proportion: f64,
    pub aggressive_cap: usize,
    pub podi: PodiConfig,
    /// Also ramp β under the podi strategy.
    pub podi_with_kla: bool,
    pub bow_weight: f64,
    pub fader_weight: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Podi,
            kla_ramp_steps: 5000,
            cycle_length: 1000,
            cycle_proportion: 0.5,
            aggressive_cap: 30,
            podi: PodiConfig::default(),
            podi_with_kla: false,
            bow_weight: 1.0,
            fader_weight: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.kla_ramp_steps == 0 || self.cycle_length == 0 {
            return bad("ramp steps and cycle length must be positive");
        }
        if !(self.cycle_proportion > 0.0 && self.cycle_proportion <= 1.0) {
            return bad("cycle proportion must be in (0, 1]");
        }
        if self.aggressive_cap == 0 {
            return bad("aggressive inner-step cap must be at least 1");
        }
        if !(self.podi.lambda > 0.0) || !self.podi.lambda.is_finite() {
            return bad("podi lambda must be positive");
        }
        if self.bow_weight < 0.0 || self.fader_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// KL weight β at a given optimizer step.
pub fn anneal_weight(step: usize, config: &ScheduleConfig) -> f64 {
    let kla = || (step as f64 / config.kla_ramp_steps as f64).min(1.0);
    match config.strategy {
        Strategy::Kla => kla(),
        Strategy::Podi if config.podi_with_kla => kla(),
        Strategy::Cyclic => {
            let t = config.cycle_length as f64;
            let phase = (step % config.cycle_length) as f64;
            (phase / (config.cycle_proportion * t)).min(1.0)
        }
        _ => 1.0,
    }
}

/// Each element's partner: a random cyclic permutation, so every element is
/// paired with a distinct other one and no partner is drawn twice.
pub fn podi_pairs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut partner = vec![0; n];
    for i in 0..n {
        partner[order[i]] = order[(i + 1) % n];
    }
    partner
}

/// `Σᵢ min(KL(qᵢ ‖ q_partner(i)) − λ, 0)²` on plain values.
pub fn podi_cost<S: Scalar>(
    posteriors: &[GaussianParams<S>],
    partners: &[usize],
    lambda: S,
) -> Result<S> {
    check_podi(posteriors.len(), partners)?;
    let mut total = S::zero();
    for (i, &j) in partners.iter().enumerate() {
        let gap = (kl_diag_gaussians(&posteriors[i], &posteriors[j])? - lambda).min(S::zero());
        total = total + gap * gap;
    }
    Ok(total)
}

fn check_podi(n: usize, partners: &[usize]) -> Result<()> {
    if n < 2 {
        return Err(ModelError::Contract("podi needs at least two posteriors".into()));
    }
    if partners.len() != n || partners.iter().enumerate().any(|(i, &j)| j == i || j >= n) {
        return Err(ModelError::Contract("podi partners must pair each element with another".into()));
    }
    Ok(())
}

/// Po-di cost as a graph node; gradients reach both sides of every pair.
pub fn podi_loss(g: &mut Graph<f64>, posteriors: &[GaussianVars], partners: &[usize], lambda: f64) -> Result<Var> {
    check_podi(posteriors.len(), partners)?;
    let mut terms = Vec::with_capacity(partners.len());
    for (i, &j) in partners.iter().enumerate() {
        let kl = kl_on_graph(g, posteriors[i], posteriors[j])?;
        let gap = g.affine(kl, 1.0, -lambda)?;
        let gap = g.clamp(gap, f64::NEG_INFINITY, 0.0)?;
        terms.push(g.square(gap)?);
    }
    sum_scalars(g, &terms)
}

/// Bag-of-words NLL of the response tokens given `z`, order-free.
pub fn bow_loss(g: &mut Graph<f64>, model: &Model, z: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let logits = model.bow_logits(g, z)?;
    let rows = vec![0; targets.len()];
    let tiled = g.gather_rows(logits, &rows)?;
    let mask = vec![true; targets.len()];
    Ok(g.cross_entropy(tiled, targets, &mask, Reduction::Sum)?)
}

fn sum_scalars(g: &mut Graph<f64>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// One example with every network input pre-encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub prior: EncodedSequence,
    pub posterior: EncodedSequence,
    pub fader: EncodedSequence,
    pub decoder: EncodedSequence,
    /// Recognition fader value, fixed per example.
    pub alpha: f64,
    /// Non-reserved response token ids.
    pub bow_targets: Vec<usize>,
    pub category: Option<String>,
}

impl TrainingExample {
    pub fn response_tokens(&self) -> usize {
        self.decoder.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes a corpus and attaches the recognition fader of every example.
pub fn prepare_examples(
    corpus: &[DialogueExample],
    vocab: &Vocab,
    encoder: &Encoder,
    extractor: &KeywordExtractor,
    table: &EmbeddingTable<f64>,
) -> Vec<TrainingExample> {
    corpus
        .iter()
        .map(|ex| {
            let [prior, posterior, fader, decoder] = encoder.all(vocab, ex);
            let bow_targets = vocab
                .encode_text(&ex.response)
                .into_iter()
                .filter(|&id| !Special::is_special(id))
                .collect();
            TrainingExample {
                prior,
                posterior,
                fader,
                decoder,
                alpha: recognition_fader(&ex.profile, &ex.response, extractor, table).alpha(),
                bow_targets,
                category: ex.category.clone(),
            }
        })
        .collect()
}

/// Per-example averages of each loss term for one batch; `podi` is the
/// batch sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_zp: f64,
    pub fader: f64,
    pub podi: f64,
    pub bow: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 8] = ["step", "recon", "kl_zp", "fader", "podi", "bow", "beta", "total"];

    pub fn csv_record(&self, step: usize) -> [String; 8] {
        [
            step.to_string(),
            format!("{:e}", self.recon),
            format!("{:e}", self.kl_zp),
            format!("{:e}", self.fader),
            format!("{:e}", self.podi),
            format!("{:e}", self.bow),
            format!("{:e}", self.beta),
            format!("{:e}", self.total),
        ]
    }

    /// Weighted sum of the terms as the objective combines them.
    pub fn weighted_sum(&self, schedule: &ScheduleConfig) -> f64 {
        self.recon
            + self.beta * self.kl_zp
            + schedule.fader_weight * self.fader
            + self.podi
            + schedule.bow_weight * self.bow
    }
}

/// Graph handles of a batch loss.
pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub posteriors: Vec<GaussianVars>,
    pub priors: Vec<GaussianVars>,
    pub samples: Vec<Var>,
}

/// Which optional terms a loss evaluation includes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub beta: f64,
    pub podi_lambda: Option<f64>,
    pub bow_weight: f64,
    pub fader_weight: f64,
}

impl Terms {
    pub fn for_schedule(schedule: &ScheduleConfig, step: usize) -> Self {
        Self {
            beta: anneal_weight(step, schedule),
            podi_lambda: (schedule.strategy == Strategy::Podi).then_some(schedule.podi.lambda),
            bow_weight: if schedule.strategy == Strategy::Bow { schedule.bow_weight } else { 0.0 },
            fader_weight: schedule.fader_weight,
        }
    }

    pub fn elbo_only(beta: f64, fader_weight: f64) -> Self {
        Self {
            beta,
            podi_lambda: None,
            bow_weight: 0.0,
            fader_weight,
        }
    }
}

/// Latent noise and Po-di pairing for one batch, drawn up front so a batch
/// loss can be re-evaluated exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub latent: Vec<Vec<f64>>,
    pub partners: Vec<usize>,
}

impl BatchNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        let latent = (0..n)
            .map(|_| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let partners = if n >= 2 { podi_pairs(n, rng) } else { Vec::new() };
        Self { latent, partners }
    }

    pub fn zero(n: usize, k: usize) -> Self {
        Self {
            latent: vec![vec![0.0; k]; n],
            partners: if n >= 2 { (0..n).map(|i| (i + 1) % n).collect() } else { Vec::new() },
        }
    }
}

/// Batch objective: mean over examples of reconstruction NLL, β-weighted
/// KL, fader match and optional bag-of-words terms, plus the Po-di cost
/// summed over the batch pairs.
pub fn batch_loss(
    g: &mut Graph<f64>,
    model: &Model,
    batch: &[&TrainingExample],
    noise: &BatchNoise,
    terms: Terms,
) -> Result<BatchLoss> {
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::Contract("empty batch".into()));
    }
    if noise.latent.len() != n {
        return Err(ModelError::Contract("noise does not match the batch".into()));
    }
    let mut parts = Vec::new();
    let mut posteriors = Vec::with_capacity(n);
    let mut priors = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    let mut bd = LossBreakdown {
        beta: terms.beta,
        ..Default::default()
    };
    let inv_n = 1.0 / n as f64;
    for (ex, eps) in batch.iter().zip(&noise.latent) {
        let q = model.encode_posterior_zp(g, &ex.posterior)?;
        let p = model.encode_prior_zp(g, &ex.prior)?;
        let z = g.reparameterize(q.mu, q.logvar, eps)?;
        let alpha = g.constant(Tensor::scalar(ex.alpha));
        let trace = model.decode(g, &ex.decoder, z, alpha, Default::default())?;
        let mask = vec![true; trace.targets.len()];
        let recon = g.cross_entropy(trace.logits, &trace.targets, &mask, Reduction::Sum)?;
        bd.recon += g.scalar(recon) * inv_n;
        parts.push(g.scale(recon, inv_n)?);

        let kl = kl_on_graph(g, q, p)?;
        bd.kl_zp += g.scalar(kl) * inv_n;
        if terms.beta != 0.0 {
            parts.push(g.scale(kl, terms.beta * inv_n)?);
        }

        let alpha_hat = model.prior_fader(g, &ex.fader, z)?;
        let target = g.constant(Tensor::matrix(1, 1, vec![ex.alpha])?);
        let diff = g.sub(alpha_hat, target)?;
        let sq = g.square(diff)?;
        let fader = g.sum(sq)?;
        bd.fader += g.scalar(fader) * inv_n;
        if terms.fader_weight != 0.0 {
            parts.push(g.scale(fader, terms.fader_weight * inv_n)?);
        }

        if terms.bow_weight != 0.0 {
            let bow = bow_loss(g, model, z, &ex.bow_targets)?;
            bd.bow += g.scalar(bow) * inv_n;
            parts.push(g.scale(bow, terms.bow_weight * inv_n)?);
        }
        posteriors.push(q);
        priors.push(p);
        samples.push(z);
    }
    if let Some(lambda) = terms.podi_lambda {
        if n >= 2 {
            let podi = podi_loss(g, &posteriors, &noise.partners, lambda)?;
            bd.podi = g.scalar(podi);
            parts.push(podi);
        }
    }
    let loss = sum_scalars(g, &parts)?;
    bd.total = g.scalar(loss);
    Ok(BatchLoss {
        loss,
        breakdown: bd,
        posteriors,
        priors,
        samples,
    })
}

/// The ELBO terms alone, with β and fader weight as given.
pub fn elbo(
    g: &mut Graph<f64>,
    model: &Model,
    batch: &[&TrainingExample],
    noise: &BatchNoise,
    beta: f64,
    fader_weight: f64,
) -> Result<BatchLoss> {
    batch_loss(g, model, batch, noise, Terms::elbo_only(beta, fader_weight))
}

/// The strategy-specific training objective at `step`.
pub fn total_loss(
    g: &mut Graph<f64>,
    model: &Model,
    batch: &[&TrainingExample],
    noise: &BatchNoise,
    schedule: &ScheduleConfig,
    step: usize,
) -> Result<BatchLoss> {
    schedule.validate()?;
    batch_loss(g, model, batch, noise, Terms::for_schedule(schedule, step))
}
