//! Corpus directories: `train.jsonl`, `dev.jsonl`, `test.jsonl`,
//! `vocab.txt`, and optionally `embeddings.txt` and `stopwords.txt`.

use std::path::Path;

use persona_lab::corpus::{
    load_jsonl, synthetic_embeddings, template_stop_words, write_jsonl, CorpusSplits, Vocab,
};
use persona_lab::eval::EmbeddingTable;
use persona_lab::pipeline::Prepared;

use crate::config::RunConfig;
use crate::failure::Failure;

pub const FILES: [&str; 3] = ["train.jsonl", "dev.jsonl", "test.jsonl"];

pub fn write_dir(dir: &Path, splits: &CorpusSplits, vocab: &Vocab, seed: u64) -> Result<(), Failure> {
    for (name, split) in FILES.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        write_jsonl(&dir.join(name), split).map_err(Failure::data)?;
    }
    vocab.save(&dir.join("vocab.txt")).map_err(Failure::data)?;
    synthetic_embeddings(seed).save(&dir.join("embeddings.txt"))?;
    std::fs::write(dir.join("stopwords.txt"), template_stop_words().join("\n") + "\n")?;
    Ok(())
}

fn load_dir(dir: &Path, vocab: Option<Vocab>) -> Result<Prepared, Failure> {
    let read = |name: &str| load_jsonl(&dir.join(name)).map_err(|e| Failure::data(format!("{}: {e}", dir.join(name).display())));
    let splits = CorpusSplits {
        train: read(FILES[0])?,
        dev: read(FILES[1])?,
        test: read(FILES[2])?,
    };
    let vocab = match vocab {
        Some(v) => Some(v),
        None if dir.join("vocab.txt").exists() => Some(Vocab::load(&dir.join("vocab.txt")).map_err(Failure::data)?),
        None => None,
    };
    let embeddings = dir.join("embeddings.txt");
    let table = if embeddings.exists() {
        EmbeddingTable::load(&embeddings)?
    } else {
        eprintln!("warning: {} has no embeddings.txt; P.Distance will be zero", dir.display());
        EmbeddingTable::new(1)
    };
    let stop = match std::fs::read_to_string(dir.join("stopwords.txt")) {
        Ok(text) => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        Err(_) => Vec::new(),
    };
    Ok(Prepared::new(splits, vocab, table, stop)?)
}

/// Corpus of a run: the configured directory or the configured synthetic
/// spec. A given vocabulary (from a checkpoint) replaces the corpus one.
pub fn prepare(config: &RunConfig, vocab: Option<Vocab>) -> Result<Prepared, Failure> {
    let mut data = match &config.data {
        Some(dir) => load_dir(dir, vocab)?,
        None => {
            let p = Prepared::synthetic(&config.synth)?;
            match vocab {
                Some(v) => Prepared::new(p.splits, Some(v), p.table, template_stop_words())?,
                None => p,
            }
        }
    };
    if let Some(n) = config.train_limit {
        data.train.truncate(n);
        data.splits.train.truncate(n);
    }
    if data.train.is_empty() || data.dev.len() < 2 {
        return Err(Failure::data("corpus needs training examples and at least two development examples"));
    }
    Ok(data)
}
