//! Response generation from the prior side: latent sampling, nucleus
//! filtered decoding, multi-sample generation and fader sweeps.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_to_text, DialogueExample, Encoder, Special, Utterance, Vocab};
use crate::eval::{p_distance, EmbeddingTable, KeywordExtractor};
use crate::network::{Model, ModelError, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Responses drawn per context.
    pub samples: usize,
    /// Fixed fader value instead of the prior fader's prediction.
    pub alpha: Option<f64>,
    pub seed: u64,
    /// Draw `z_p` from the prior; when false the prior mean is used.
    pub latent_noise: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            top_k: 4,
            top_p: 0.9,
            max_new_tokens: 24,
            temperature: 1.0,
            samples: 3,
            alpha: None,
            seed: 23,
            latent_noise: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.samples == 0 || self.max_new_tokens == 0 {
            return bad("samples and max_new_tokens must be positive");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad("fader override must be in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Keeps the `top_k` most probable tokens, then the shortest prefix of them
/// whose renormalized mass reaches `top_p`, and renormalizes that prefix.
/// Ties are broken by token index.
pub fn nucleus_filter(logits: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    if logits.is_empty() {
        return out;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut keep = 0;
    let mut mass = 0.0;
    for w in &weights {
        keep += 1;
        mass += w / total;
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    let kept: f64 = weights[..keep].iter().sum();
    for (&i, w) in order[..keep].iter().zip(&weights) {
        out[i] = w / kept;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub text: String,
    pub tokens: Vec<usize>,
    pub alpha: f64,
    pub z: Vec<f64>,
    pub z_norm: f64,
}

/// Draws `z_p` from the prior of `context`, or takes its mean.
fn prior_latent<R: Rng>(model: &Model, vocab: &Vocab, encoder: &Encoder, context: &[Utterance], noise: bool, rng: &mut R) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let p = model.encode_prior_zp(&mut g, &encoder.prior_zp(vocab, context))?.values(&g);
    Ok(p.mu
        .iter()
        .zip(&p.logvar)
        .map(|(&m, &lv)| if noise { m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal) } else { m })
        .collect())
}

fn prior_alpha(model: &Model, vocab: &Vocab, encoder: &Encoder, context: &[Utterance], z: &[f64]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
    let a = model.prior_fader(&mut g, &encoder.fader_prior(vocab, context), zv)?;
    Ok(g.scalar(a))
}

/// Samples one response token by token for fixed `z` and `alpha`.
pub fn decode_response<R: Rng>(
    model: &Model,
    vocab: &Vocab,
    encoder: &Encoder,
    context: &[Utterance],
    z: &[f64],
    alpha: f64,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if vocab.len() != model.config.vocab_size {
        return Err(ModelError::Contract(format!(
            "vocabulary of {} tokens does not match the model's {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut seq = encoder.decoder_prompt(vocab, context);
    let mut out = Vec::new();
    for _ in 0..config.max_new_tokens {
        if seq.len() >= model.config.max_len {
            break;
        }
        let mut g = Graph::no_grad();
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let av = g.constant(Tensor::scalar(alpha));
        let logits = model.next_token_logits(&mut g, &seq, zv, av)?;
        let mut row: Vec<f64> = g.value(logits).data().iter().map(|x| x / config.temperature).collect();
        for s in Special::ALL {
            if s != Special::Eos {
                row[s.id()] = f64::NEG_INFINITY;
            }
        }
        let probs = nucleus_filter(&row, config.top_k, config.top_p);
        let dist = WeightedIndex::new(&probs).map_err(|e| ModelError::Contract(format!("sampling: {e}")))?;
        let tok = dist.sample(rng);
        if tok == Special::Eos.id() {
            break;
        }
        out.push(tok);
        seq.push_target(tok);
    }
    Ok(out)
}

/// `config.samples` responses, each with its own prior draw of `z_p`.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    encoder: &Encoder,
    context: &[Utterance],
    config: &DecodeConfig,
) -> Result<Vec<GeneratedSample>> {
    config.validate()?;
    if context.is_empty() {
        return Err(ModelError::Contract("context is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.samples)
        .map(|_| {
            let z = prior_latent(model, vocab, encoder, context, config.latent_noise, &mut rng)?;
            let alpha = match config.alpha {
                Some(a) => a,
                None => prior_alpha(model, vocab, encoder, context, &z)?,
            };
            let tokens = decode_response(model, vocab, encoder, context, &z, alpha, config, &mut rng)?;
            Ok(GeneratedSample {
                text: decode_to_text(vocab, &tokens),
                z_norm: z.iter().map(|x| x * x).sum::<f64>().sqrt(),
                tokens,
                alpha,
                z,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub response: String,
    pub length_tokens: usize,
    pub p_distance: f64,
}

/// The eleven fader values `0.0, 0.1, …, 1.0`.
pub fn sweep_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Decodes one example's context at every grid value of the fader, with a
/// shared `z_p` and a shared sampling seed, and scores each response
/// against the example's profile.
pub fn fader_sweep(
    model: &Model,
    vocab: &Vocab,
    encoder: &Encoder,
    example: &DialogueExample,
    extractor: &KeywordExtractor,
    table: &EmbeddingTable<f64>,
    config: &DecodeConfig,
) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z = prior_latent(model, vocab, encoder, &example.context, config.latent_noise, &mut rng)?;
    let decode_seed: u64 = rng.gen();
    sweep_grid()
        .into_iter()
        .map(|alpha| {
            let mut rng = ChaCha8Rng::seed_from_u64(decode_seed);
            let tokens = decode_response(model, vocab, encoder, &example.context, &z, alpha, config, &mut rng)?;
            let response = decode_to_text(vocab, &tokens);
            let pd = p_distance(&example.profile, &response, extractor, table).value;
            Ok(SweepPoint {
                alpha,
                length_tokens: tokens.len(),
                response,
                p_distance: pd,
            })
        })
        .collect()
}

/// CSV columns: `alpha, response, length_tokens, p_distance`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "response", "length_tokens", "p_distance"]).expect("in-memory write");
    for p in points {
        w.write_record([
            format!("{:.1}", p.alpha),
            p.response.clone(),
            p.length_tokens.to_string(),
            format!("{:e}", p.p_distance),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Mean response length and P.Distance at one fader value across contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub alpha: f64,
    pub mean_length_tokens: f64,
    pub mean_p_distance: f64,
    pub contexts: usize,
}

/// Averages per-context sweeps point by point. Every sweep must use the
/// same grid.
pub fn summarize_sweeps(sweeps: &[Vec<SweepPoint>]) -> Result<Vec<SweepSummary>> {
    let Some(first) = sweeps.first() else {
        return Err(ModelError::Contract("no sweeps to summarize".into()));
    };
    if sweeps.iter().any(|s| s.len() != first.len()) {
        return Err(ModelError::Contract("sweeps use different grids".into()));
    }
    let n = sweeps.len() as f64;
    Ok((0..first.len())
        .map(|i| SweepSummary {
            alpha: first[i].alpha,
            mean_length_tokens: sweeps.iter().map(|s| s[i].length_tokens as f64).sum::<f64>() / n,
            mean_p_distance: sweeps.iter().map(|s| s[i].p_distance).sum::<f64>() / n,
            contexts: sweeps.len(),
        })
        .collect())
}

/// CSV columns: `alpha, mean_length_tokens, mean_p_distance, contexts`.
pub fn summary_csv(rows: &[SweepSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "mean_length_tokens", "mean_p_distance", "contexts"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            format!("{:.1}", r.alpha),
            format!("{:e}", r.mean_length_tokens),
            format!("{:e}", r.mean_p_distance),
            r.contexts.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Pearson correlation; `None` when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
