//! The dual-latent model: a context encoder (shared by the perception prior
//! and the fader prior), a profile recognition encoder, Gaussian latent
//! heads, the fader gate and an autoregressive decoder that re-injects the
//! latent vectors at fixed layer intervals.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Vocab};
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    recognition_fader, DecodeOptions, DecoderTrace, FaderValue, GaussianParams, GaussianVars,
    LOGVAR_LIMIT,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Latent slots are re-mixed after every `injection_interval` decoder
    /// layers.
    pub injection_interval: usize,
    pub vocab_size: usize,
    /// Longest sequence any network accepts.
    pub max_len: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

/// The desk preset with an unset vocabulary size.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ModelConfig {
    /// Small model trained from scratch on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden: 64,
            latent: 16,
            encoder_layers: 3,
            decoder_layers: 4,
            heads: 4,
            injection_interval: 2,
            vocab_size,
            max_len: 96,
            ffn_mult: 4,
            seed: 17,
        }
    }

    /// The published model's dimensions (345M-parameter decoder).
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            hidden: 1024,
            latent: 1024,
            encoder_layers: 3,
            decoder_layers: 24,
            heads: 16,
            injection_interval: 4,
            vocab_size,
            max_len: 1024,
            ffn_mult: 4,
            seed: 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("hidden size must be a positive multiple of the head count");
        }
        if self.latent < 2 {
            return fail("latent size must be at least 2");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("layer counts must be positive");
        }
        if self.injection_interval == 0 || self.injection_interval > self.decoder_layers {
            return fail("injection interval must be in 1..=decoder layers");
        }
        if self.vocab_size <= crate::corpus::Special::ALL.len() {
            return fail("vocabulary holds only reserved tokens");
        }
        if self.max_len < 4 || self.ffn_mult == 0 {
            return fail("max_len must be at least 4 and ffn_mult positive");
        }
        Ok(())
    }

    /// Decoder layers (1-based) after which latent slots are re-mixed.
    pub fn injection_sites(&self) -> Vec<usize> {
        (1..self.decoder_layers)
            .filter(|l| l % self.injection_interval == 0)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct StackParams {
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub role_emb: ParamId,
    /// Shared by the perception prior and the fader prior.
    pub context_encoder: StackParams,
    pub profile_encoder: StackParams,
    pub prior_head: HeadParams,
    pub posterior_head: HeadParams,
    pub z_proj: HeadParams,
    pub fader_head: HeadParams,
    pub fader_dir: ParamId,
    pub decoder: StackParams,
    pub mix: Vec<ParamId>,
    pub bow_head: HeadParams,
}

/// Parameters plus the typed index into them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f64>,
    pub(crate) layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("finite init")
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut store = ParamStore::new();
        let d = config.hidden;
        let k = config.latent;
        let v = config.vocab_size;

        let tok_emb = store.register("tok_emb", init.normal(&[v, d], 0.1))?;
        let mut pos = init.normal(&[config.max_len + 1, d], 0.1);
        pos.data_mut()[..d].iter_mut().for_each(|x| *x = 0.0);
        let pos_emb = store.register("pos_emb", pos)?;
        let role_emb = store.register("role_emb", init.normal(&[1, d], 0.1))?;

        let context_encoder = Self::stack(&mut store, &mut init, "ctx_enc", config.encoder_layers, &config)?;
        let profile_encoder = Self::stack(&mut store, &mut init, "prof_enc", config.encoder_layers, &config)?;
        let prior_head = Self::linear(&mut store, &mut init, "prior_head", d, 2 * k, 0.5)?;
        let posterior_head = Self::linear(&mut store, &mut init, "posterior_head", d, 2 * k, 0.5)?;
        let z_proj = Self::linear(&mut store, &mut init, "z_proj", k, d, 1.0)?;
        let fader_head = Self::linear(&mut store, &mut init, "fader_head", d, 1, 0.5)?;
        let fader_dir = store.register("fader_dir", init.normal(&[1, d], 0.5))?;
        let decoder = Self::stack(&mut store, &mut init, "dec", config.decoder_layers, &config)?;
        let mix = config
            .injection_sites()
            .into_iter()
            .map(|l| store.register(format!("mix.{l}"), Tensor::filled(&[1], 0.5)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let bow_head = Self::linear(&mut store, &mut init, "bow_head", k, v, 1.0)?;

        Ok(Self {
            config,
            params: store,
            layout: Layout {
                tok_emb,
                pos_emb,
                role_emb,
                context_encoder,
                profile_encoder,
                prior_head,
                posterior_head,
                z_proj,
                fader_head,
                fader_dir,
                decoder,
                mix,
                bow_head,
            },
        })
    }

    /// Desk-preset model sized to a vocabulary.
    pub fn for_vocab(vocab: &Vocab) -> Result<Self> {
        Self::new(ModelConfig::desk(vocab.len()))
    }

    fn linear(
        store: &mut ParamStore<f64>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<HeadParams> {
        let std = gain / (fan_in as f64).sqrt();
        Ok(HeadParams {
            w: store.register(format!("{name}.w"), init.normal(&[fan_in, fan_out], std))?,
            b: store.register(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn stack(
        store: &mut ParamStore<f64>,
        init: &mut Init,
        name: &str,
        layers: usize,
        config: &ModelConfig,
    ) -> Result<StackParams> {
        let d = config.hidden;
        let f = config.ffn_mult * d;
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / (2.0 * layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = |s: &str| format!("{name}.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.register(p("ln1.g"), Tensor::filled(&[d], 1.0))?,
                ln1_b: store.register(p("ln1.b"), Tensor::zeros(&[d]))?,
                wq: store.register(p("wq"), init.normal(&[d, d], std))?,
                wk: store.register(p("wk"), init.normal(&[d, d], std))?,
                wv: store.register(p("wv"), init.normal(&[d, d], std))?,
                wo: store.register(p("wo"), init.normal(&[d, d], out_std))?,
                bo: store.register(p("bo"), Tensor::zeros(&[d]))?,
                ln2_g: store.register(p("ln2.g"), Tensor::filled(&[d], 1.0))?,
                ln2_b: store.register(p("ln2.b"), Tensor::zeros(&[d]))?,
                w1: store.register(p("w1"), init.normal(&[d, f], std))?,
                b1: store.register(p("b1"), Tensor::zeros(&[f]))?,
                w2: store.register(p("w2"), init.normal(&[f, d], 1.0 / (f as f64).sqrt() / (2.0 * layers as f64).sqrt()))?,
                b2: store.register(p("b2"), Tensor::zeros(&[d]))?,
            });
        }
        Ok(StackParams {
            blocks,
            lnf_g: store.register(format!("{name}.lnf.g"), Tensor::filled(&[d], 1.0))?,
            lnf_b: store.register(format!("{name}.lnf.b"), Tensor::zeros(&[d]))?,
        })
    }

    /// Parameters that feed the recognition side only (profile encoder and
    /// posterior head). Used by encoder-only update phases.
    pub fn recognition_params(&self) -> Vec<ParamId> {
        let mut ids = Self::stack_ids(&self.layout.profile_encoder);
        ids.push(self.layout.posterior_head.w);
        ids.push(self.layout.posterior_head.b);
        ids
    }

    /// Parameters of the context encoder, shared by both prior networks.
    pub fn context_encoder_params(&self) -> Vec<ParamId> {
        Self::stack_ids(&self.layout.context_encoder)
    }

    /// Encoder parameters read by the perception prior.
    pub fn prior_encoder_params(&self) -> Vec<ParamId> {
        self.context_encoder_params()
    }

    /// Encoder parameters read by the fader prior.
    pub fn fader_prior_encoder_params(&self) -> Vec<ParamId> {
        self.context_encoder_params()
    }

    /// Encoder parameters read by the recognition network.
    pub fn profile_encoder_params(&self) -> Vec<ParamId> {
        Self::stack_ids(&self.layout.profile_encoder)
    }

    pub fn position_table(&self) -> ParamId {
        self.layout.pos_emb
    }

    pub fn bow_head_params(&self) -> [ParamId; 2] {
        [self.layout.bow_head.w, self.layout.bow_head.b]
    }

    pub fn prior_head_params(&self) -> [ParamId; 2] {
        [self.layout.prior_head.w, self.layout.prior_head.b]
    }

    pub fn posterior_head_params(&self) -> [ParamId; 2] {
        [self.layout.posterior_head.w, self.layout.posterior_head.b]
    }

    pub fn mix_params(&self) -> &[ParamId] {
        &self.layout.mix
    }

    /// Keeps every injection mixing weight inside `[0, 1]`.
    pub fn project_mix_weights(&mut self) {
        for &id in &self.layout.mix {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|w| *w = w.clamp(0.0, 1.0));
        }
    }

    /// Sets every injection mixing weight to `w`.
    pub fn set_mix_weights(&mut self, w: f64) {
        for &id in &self.layout.mix {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = w);
        }
    }

    fn stack_ids(s: &StackParams) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &s.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2,
                b.b2,
            ]);
        }
        ids.extend([s.lnf_g, s.lnf_b]);
        ids
    }

    /// SHA-256 over the named parameters, for identity checks.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &id in ids {
            for v in self.params.get(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests;
