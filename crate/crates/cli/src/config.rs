use std::path::{Path, PathBuf};

use persona_lab::corpus::SynthSpec;
use persona_lab::generator::DecodeConfig;
use persona_lab::network::ModelConfig;
use persona_lab::objective::Strategy;
use persona_lab::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

/// Everything a run depends on. Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Corpus directory written by `synth`; a synthetic corpus is generated
    /// from `synth` when absent.
    pub data: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Train on the first N training examples only.
    pub train_limit: Option<usize>,
    /// `vocab_size` is always taken from the vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval_contexts: usize,
    pub strategies: Vec<Strategy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synth: SynthSpec::default(),
            train_limit: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval_contexts: 50,
            strategies: vec![Strategy::None, Strategy::Kla, Strategy::Bow, Strategy::Podi],
        }
    }
}

fn unknown_keys(user: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(u), Value::Object(r)) = (user, reference) {
        for (k, v) in u {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => unknown_keys(v, rv, &here, out),
                None => out.push(here),
            }
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    /// Parses a possibly partial JSON config. Unknown keys are all reported
    /// at once.
    pub fn parse(text: &str) -> Result<Self, String> {
        let user: Value = serde_json::from_str(text).map_err(|e| format!("not valid JSON: {e}"))?;
        let reference = serde_json::to_value(Self::default()).expect("config serializes");
        let mut bad = Vec::new();
        unknown_keys(&user, &reference, "", &mut bad);
        if !bad.is_empty() {
            return Err(format!("unknown keys: {}", bad.join(", ")));
        }
        serde_json::from_value(user).map_err(|e| format!("bad value: {e}"))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.synth.validate().map_err(Failure::usage)?;
        self.train.validate().map_err(Failure::usage)?;
        self.decode.validate().map_err(Failure::usage)?;
        if self.strategies.is_empty() {
            return Err(Failure::usage("at least one strategy is required"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
