//! Glue from raw corpus splits to model-ready examples.

use crate::corpus::{
    generate_synthetic, template_stop_words, synthetic_embeddings, CorpusSplits, DialogueExample,
    Encoder, SynthSpec, Vocab,
};
use serde::{Deserialize, Serialize};

use crate::eval::{
    distinct_n, latent_stats, p_distance, perplexity, EmbeddingTable, EvalReport, KeywordExtractor,
    AU_THRESHOLD,
};
use crate::generator::{generate, DecodeConfig};
use crate::network::{Model, Result};
use crate::objective::{prepare_examples, TrainingExample};

/// Keyword extractor fitted on the profiles and responses of a training split.
pub fn fit_extractor(train: &[DialogueExample], extra_stop_words: Vec<String>) -> KeywordExtractor {
    let texts = train
        .iter()
        .flat_map(|e| e.profile.iter().map(String::as_str).chain(std::iter::once(e.response.as_str())));
    KeywordExtractor::fit(texts, extra_stop_words)
}

/// Everything derived from one set of corpus splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: CorpusSplits,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub extractor: KeywordExtractor,
    pub table: EmbeddingTable<f64>,
    pub train: Vec<TrainingExample>,
    pub dev: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl Prepared {
    /// Builds the vocabulary from the training split unless one is given.
    pub fn new(
        splits: CorpusSplits,
        vocab: Option<Vocab>,
        table: EmbeddingTable<f64>,
        extra_stop_words: Vec<String>,
    ) -> Result<Self> {
        let vocab = match vocab {
            Some(v) => v,
            None => Vocab::build(&splits.train)?,
        };
        let encoder = Encoder::default();
        let extractor = fit_extractor(&splits.train, extra_stop_words);
        let prep = |c: &[DialogueExample]| prepare_examples(c, &vocab, &encoder, &extractor, &table);
        let (train, dev, test) = (prep(&splits.train), prep(&splits.dev), prep(&splits.test));
        Ok(Self {
            splits,
            vocab,
            encoder,
            extractor,
            table,
            train,
            dev,
            test,
        })
    }

    /// Generated corpus with its matching embedding table and stop words.
    pub fn synthetic(spec: &SynthSpec) -> Result<Self> {
        let splits = generate_synthetic(spec)?;
        Self::new(splits, None, synthetic_embeddings(spec.seed), template_stop_words())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other}; expected train, dev or test")),
        }
    }
}

impl Prepared {
    pub fn split(&self, split: Split) -> (&[DialogueExample], &[TrainingExample]) {
        match split {
            Split::Train => (&self.splits.train, &self.train),
            Split::Dev => (&self.splits.dev, &self.dev),
            Split::Test => (&self.splits.test, &self.test),
        }
    }
}

/// Perplexity and latent statistics over the whole split; Distinct-n and
/// P.Distance over `config.samples` responses for each of the first
/// `contexts` examples.
pub fn evaluate(
    model: &Model,
    data: &Prepared,
    split: Split,
    contexts: usize,
    config: &DecodeConfig,
) -> Result<EvalReport> {
    let (raw, examples) = data.split(split);
    let ppl = perplexity(model, examples)?;
    let stats = latent_stats(model, examples, AU_THRESHOLD)?;
    let mut responses = Vec::new();
    let mut pd = 0.0;
    for (i, ex) in raw.iter().take(contexts).enumerate() {
        let cfg = DecodeConfig { seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        for s in generate(model, &data.vocab, &data.encoder, &ex.context, &cfg)? {
            pd += p_distance(&ex.profile, &s.text, &data.extractor, &data.table).value;
            responses.push(s.text);
        }
    }
    let n = responses.len();
    Ok(EvalReport {
        ppl,
        distinct_1: distinct_n(&responses, 1),
        distinct_2: distinct_n(&responses, 2),
        p_distance: if n == 0 { 0.0 } else { pd / n as f64 },
        kl_cost: stats.kl_cost,
        active_units: stats.active_units,
        samples: n,
    })
}
