use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ModelError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PLABCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocab) -> Result<Self> {
        if model.config.vocab_size != vocab.len() {
            return Err(ModelError::Checkpoint(format!(
                "model expects {} tokens but the vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { model, vocab })
    }

    /// `magic | version u32 | header length u64 | JSON header | f64 values | sha256`
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 8 * self.model.params.total_values() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch, file is corrupt"));
        }
        let mut at = MAGIC.len();
        let version = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        at += 4;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(body[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        let json = body.get(at..at + len).ok_or_else(|| bad("truncated header"))?;
        at += len;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        let mut model = Model::new(header.config)?;
        if header.tensors.len() != model.params.len() {
            return Err(bad("tensor count does not match the model layout"));
        }
        for (name, shape) in header.tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
            let n: usize = shape.iter().product();
            let raw = body.get(at..at + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            at += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.params.set(id, Tensor::new(shape, data)?)?;
        }
        if at != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Self::new(model, vocab)
    }

    /// Fails unless the stored architecture equals `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(ModelError::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let ck = Checkpoint::new(model.clone(), vocab.clone())?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ck.to_bytes())?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
