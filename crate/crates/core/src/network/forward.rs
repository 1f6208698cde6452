use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSequence, Special};
use crate::eval::{p_distance, EmbeddingTable, KeywordExtractor};
use crate::tensor::{Graph, ParamId, Scalar, Tensor, Var};

use super::{BlockParams, HeadParams, Model, ModelError, Result, StackParams};

/// Log-variances are clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]` before use.
pub const LOGVAR_LIMIT: f64 = 8.0;
const LN_EPS: f64 = 1e-9;

/// Mean and log-variance of a diagonal Gaussian, as plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams<S> {
    pub mu: Vec<S>,
    pub logvar: Vec<S>,
}

impl<S: Scalar> GaussianParams<S> {
    pub fn new(mu: Vec<S>, logvar: Vec<S>) -> Self {
        Self { mu, logvar }
    }

    pub fn standard(k: usize) -> Self {
        Self {
            mu: vec![S::zero(); k],
            logvar: vec![S::zero(); k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Gaussian parameters living on a graph, each of shape `[1×K]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn values(&self, g: &Graph<f64>) -> GaussianParams<f64> {
        GaussianParams {
            mu: g.value(self.mu).data().to_vec(),
            logvar: g.value(self.logvar).data().to_vec(),
        }
    }

    pub fn constant(g: &mut Graph<f64>, p: &GaussianParams<f64>) -> Result<Self> {
        let k = p.mu.len();
        Ok(Self {
            mu: g.constant(Tensor::matrix(1, k, p.mu.clone())?),
            logvar: g.constant(Tensor::matrix(1, k, p.logvar.clone())?),
        })
    }
}

/// Scalar persona gate in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaderValue(f64);

impl FaderValue {
    pub fn new(alpha: f64) -> Self {
        Self(if alpha.is_finite() { alpha.clamp(0.0, 1.0) } else { 0.0 })
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// Recognition-side fader: persona distance between profile and response,
/// no parameters involved.
pub fn recognition_fader<T: AsRef<str>>(
    profile: &[T],
    response: &str,
    extractor: &KeywordExtractor,
    table: &EmbeddingTable<f64>,
) -> FaderValue {
    FaderValue::new(p_distance(profile, response, extractor, table).value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Apply the latent re-mixing at injection sites.
    pub inject: bool,
    /// Compute logits for every position instead of only the ones that
    /// predict masked targets.
    pub all_positions: bool,
    /// Only the logits of the final position, for incremental sampling.
    pub last_only: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            inject: true,
            all_positions: false,
            last_only: false,
        }
    }
}

pub struct DecoderTrace {
    /// `[rows×V]` logits. With `all_positions` rows are every position;
    /// otherwise row `i` predicts the `i`-th masked target.
    pub logits: Var,
    /// Target ids aligned with the logit rows (empty with `all_positions`).
    pub targets: Vec<usize>,
    /// The two latent input rows `[2×D]` before the first layer.
    pub latent_inputs: Var,
    /// Hidden states right after each injection site, `[T×D]`.
    pub site_states: Vec<Var>,
    /// Final normalized hidden states `[T×D]`.
    pub hidden: Var,
}

impl Model {
    fn affine(&self, g: &mut Graph<f64>, x: Var, head: &HeadParams) -> Result<Var> {
        let w = g.param(&self.params, head.w);
        let b = g.param(&self.params, head.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, g: &mut Graph<f64>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gv = g.param(&self.params, gamma);
        let bv = g.param(&self.params, beta);
        Ok(g.layer_norm(x, gv, bv, LN_EPS)?)
    }

    fn attention(&self, g: &mut Graph<f64>, x: Var, p: &BlockParams, causal: bool) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let (wq, wk, wv) = (
            g.param(&self.params, p.wq),
            g.param(&self.params, p.wk),
            g.param(&self.params, p.wv),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = if causal {
                g.causal_softmax(scores)?
            } else {
                g.softmax(scores, 1)?
            };
            outs.push(g.matmul(probs, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let wo = g.param(&self.params, p.wo);
        let bo = g.param(&self.params, p.bo);
        let o = g.matmul(cat, wo)?;
        Ok(g.add_row(o, bo)?)
    }

    /// Pre-norm transformer block.
    fn block(&self, g: &mut Graph<f64>, x: Var, p: &BlockParams, causal: bool) -> Result<Var> {
        let h = self.layer_norm(g, x, p.ln1_g, p.ln1_b)?;
        let a = self.attention(g, h, p, causal)?;
        let x = g.add(x, a)?;
        let h = self.layer_norm(g, x, p.ln2_g, p.ln2_b)?;
        let w1 = g.param(&self.params, p.w1);
        let b1 = g.param(&self.params, p.b1);
        let f = g.matmul(h, w1)?;
        let f = g.add_row(f, b1)?;
        let f = g.gelu(f)?;
        let w2 = g.param(&self.params, p.w2);
        let b2 = g.param(&self.params, p.b2);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2)?;
        Ok(g.add(x, f)?)
    }

    fn check_sequence(&self, seq: &EncodedSequence) -> Result<()> {
        if !seq.is_consistent() {
            return Err(ModelError::Contract("encoded sequence fields differ in length".into()));
        }
        if seq.len() > self.config.max_len {
            return Err(ModelError::Contract(format!(
                "sequence of {} tokens exceeds the configured maximum {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Contract(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Input rows: token + position + role embeddings, with the first
    /// `leading.len()` token rows replaced by the given `[1×D]` vectors.
    fn embed(&self, g: &mut Graph<f64>, seq: &EncodedSequence, leading: &[Var]) -> Result<Var> {
        self.check_sequence(seq)?;
        let l = &self.layout;
        let tok = g.param(&self.params, l.tok_emb);
        let n_lead = leading.len();
        let rows = if n_lead == 0 {
            g.gather_rows(tok, &seq.tokens)?
        } else {
            let mut parts = leading.to_vec();
            if seq.len() > n_lead {
                parts.push(g.gather_rows(tok, &seq.tokens[n_lead..])?);
            }
            g.concat_rows(&parts)?
        };
        let pos = g.param(&self.params, l.pos_emb);
        let pos_rows = g.gather_rows(pos, &seq.positions)?;
        let mut x = g.add(rows, pos_rows)?;
        if seq.roles.iter().any(|&r| r != 0) {
            let mask: Vec<f64> = seq.roles.iter().map(|&r| if r != 0 { 1.0 } else { 0.0 }).collect();
            let mask = g.constant(Tensor::matrix(seq.len(), 1, mask)?);
            let role = g.param(&self.params, l.role_emb);
            let role_rows = g.matmul(mask, role)?;
            x = g.add(x, role_rows)?;
        }
        Ok(x)
    }

    fn run_encoder(&self, g: &mut Graph<f64>, x: Var, stack: &StackParams) -> Result<Var> {
        let mut h = x;
        for b in &stack.blocks {
            h = self.block(g, h, b, false)?;
        }
        self.layer_norm(g, h, stack.lnf_g, stack.lnf_b)
    }

    fn gaussian_head(&self, g: &mut Graph<f64>, h_slot: Var, head: &HeadParams) -> Result<GaussianVars> {
        let k = self.config.latent;
        let out = self.affine(g, h_slot, head)?;
        let mu = g.slice_cols(out, 0, k)?;
        let lv = g.slice_cols(out, k, k)?;
        let logvar = g.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Ok(GaussianVars { mu, logvar })
    }

    fn latent_slot(seq: &EncodedSequence) -> Result<()> {
        if seq.tokens.first() != Some(&Special::Zp.id()) {
            return Err(ModelError::Contract("sequence does not start with the [Z_p] slot".into()));
        }
        Ok(())
    }

    /// Perception prior from an encoded context.
    pub fn encode_prior_zp(&self, g: &mut Graph<f64>, seq: &EncodedSequence) -> Result<GaussianVars> {
        Self::latent_slot(seq)?;
        let x = self.embed(g, seq, &[])?;
        let h = self.run_encoder(g, x, &self.layout.context_encoder)?;
        let slot = g.slice_rows(h, 0, 1)?;
        self.gaussian_head(g, slot, &self.layout.prior_head)
    }

    /// Perception recognition network from an encoded profile.
    pub fn encode_posterior_zp(&self, g: &mut Graph<f64>, seq: &EncodedSequence) -> Result<GaussianVars> {
        Self::latent_slot(seq)?;
        let x = self.embed(g, seq, &[])?;
        let h = self.run_encoder(g, x, &self.layout.profile_encoder)?;
        let slot = g.slice_rows(h, 0, 1)?;
        self.gaussian_head(g, slot, &self.layout.posterior_head)
    }

    /// Maps a `[1×K]` latent sample into token-embedding space.
    pub fn project_latent(&self, g: &mut Graph<f64>, z: Var) -> Result<Var> {
        self.affine(g, z, &self.layout.z_proj)
    }

    /// `α · e_dir`, the fader's embedding-space vector; `alpha` is `[1]`-sized.
    pub fn fader_embedding(&self, g: &mut Graph<f64>, alpha: Var) -> Result<Var> {
        let dir = g.param(&self.params, self.layout.fader_dir);
        Ok(g.scale_by(dir, alpha)?)
    }

    /// Decoder input at the `[Z_alpha]` slot: the slot token's embedding
    /// plus the fader embedding.
    fn fader_slot(&self, g: &mut Graph<f64>, alpha: Var) -> Result<Var> {
        let tok = g.param(&self.params, self.layout.tok_emb);
        let base = g.gather_rows(tok, &[Special::Zalpha.id()])?;
        let fader = self.fader_embedding(g, alpha)?;
        Ok(g.add(base, fader)?)
    }

    /// Prior fader from `(z_p, [Z_alpha], context)`; returns α̂ as a `[1×1]` var.
    pub fn prior_fader(&self, g: &mut Graph<f64>, seq: &EncodedSequence, z: Var) -> Result<Var> {
        Self::latent_slot(seq)?;
        if seq.tokens.get(1) != Some(&Special::Zalpha.id()) {
            return Err(ModelError::Contract("fader input lacks the [Z_alpha] slot".into()));
        }
        let zrow = self.project_latent(g, z)?;
        let x = self.embed(g, seq, &[zrow])?;
        let h = self.run_encoder(g, x, &self.layout.context_encoder)?;
        let slot = g.slice_rows(h, 1, 1)?;
        let logit = self.affine(g, slot, &self.layout.fader_head)?;
        Ok(g.sigmoid(logit)?)
    }

    /// Autoregressive decoder over `(z_p, z_alpha, context[, response])`.
    pub fn decode(
        &self,
        g: &mut Graph<f64>,
        seq: &EncodedSequence,
        z: Var,
        alpha: Var,
        opts: DecodeOptions,
    ) -> Result<DecoderTrace> {
        Self::latent_slot(seq)?;
        let zrow = self.project_latent(g, z)?;
        let arow = self.fader_slot(g, alpha)?;
        let latent_inputs = g.concat_rows(&[zrow, arow])?;
        let x = self.embed(g, seq, &[zrow, arow])?;
        let t = seq.len();
        let sites = self.config.injection_sites();
        let mut site_states = Vec::new();
        let mut h = x;
        for (i, b) in self.layout.decoder.blocks.iter().enumerate() {
            h = self.block(g, h, b, true)?;
            let layer = i + 1;
            if opts.inject {
                if let Some(s) = sites.iter().position(|&l| l == layer) {
                    h = self.inject(g, h, latent_inputs, s, t)?;
                    site_states.push(h);
                }
            }
        }
        let hidden = self.layer_norm(g, h, self.layout.decoder.lnf_g, self.layout.decoder.lnf_b)?;
        let tok = g.param(&self.params, self.layout.tok_emb);
        if opts.last_only {
            let last = g.slice_rows(hidden, t - 1, 1)?;
            let logits = g.matmul_t(last, tok)?;
            return Ok(DecoderTrace { logits, targets: Vec::new(), latent_inputs, site_states, hidden });
        }
        if opts.all_positions {
            let logits = g.matmul_t(hidden, tok)?;
            return Ok(DecoderTrace { logits, targets: Vec::new(), latent_inputs, site_states, hidden });
        }
        let first = seq
            .loss_mask
            .iter()
            .position(|&m| m)
            .ok_or_else(|| ModelError::Contract("decoder sequence has no target positions".into()))?;
        if first == 0 || seq.loss_mask[first..].iter().any(|&m| !m) {
            return Err(ModelError::Contract("targets must form a suffix after the prompt".into()));
        }
        let rows = g.slice_rows(hidden, first - 1, t - first)?;
        let logits = g.matmul_t(rows, tok)?;
        Ok(DecoderTrace {
            logits,
            targets: seq.tokens[first..].to_vec(),
            latent_inputs,
            site_states,
            hidden,
        })
    }

    /// Logits `[1×V]` for the token following the last position of `seq`.
    pub fn next_token_logits(&self, g: &mut Graph<f64>, seq: &EncodedSequence, z: Var, alpha: Var) -> Result<Var> {
        let trace = self.decode(g, seq, z, alpha, DecodeOptions { inject: true, all_positions: false, last_only: true })?;
        Ok(trace.logits)
    }

    fn inject(&self, g: &mut Graph<f64>, h: Var, original: Var, site: usize, t: usize) -> Result<Var> {
        let raw = g.param(&self.params, self.layout.mix[site]);
        let w = g.clamp(raw, 0.0, 1.0)?;
        let one_minus = g.affine(w, -1.0, 1.0)?;
        let top = g.slice_rows(h, 0, 2)?;
        let kept = g.scale_by(top, w)?;
        let restored = g.scale_by(original, one_minus)?;
        let mixed = g.add(kept, restored)?;
        if t > 2 {
            let rest = g.slice_rows(h, 2, t - 2)?;
            Ok(g.concat_rows(&[mixed, rest])?)
        } else {
            Ok(mixed)
        }
    }

    /// Bag-of-words logits `[1×V]` from a `[1×K]` latent sample.
    pub fn bow_logits(&self, g: &mut Graph<f64>, z: Var) -> Result<Var> {
        self.affine(g, z, &self.layout.bow_head)
    }
}

