use std::collections::HashMap;
use std::path::Path;

use crate::tensor::Scalar;

use super::{EvalError, Result};

/// Word vectors of one fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    dim: usize,
    vectors: HashMap<String, Vec<S>>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<S>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(EvalError::Format(format!(
                "vector for {word} has {} entries, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[S]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Cosine similarity; `None` when a word is missing or has zero norm.
    pub fn cosine(&self, a: &str, b: &str) -> Option<S> {
        cosine(self.get(a)?, self.get(b)?)
    }

    /// Textual word-vector format: `count dim` header, then `word v1 … vd`.
    /// Words are written in sorted order.
    pub fn to_text(&self) -> String {
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        let mut out = format!("{} {}\n", self.vectors.len(), self.dim);
        for w in words {
            out.push_str(w);
            for v in &self.vectors[w] {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EvalError::Format("empty embedding file".into()))?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| EvalError::Format(format!("bad header line: {header}")))
        };
        let count = parse_usize(parts.next())?;
        let dim = parse_usize(parts.next())?;
        let mut table = Self::new(dim);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap();
            let vector = fields
                .map(|f| f.parse::<f64>().ok().and_then(S::from_f64))
                .collect::<Option<Vec<S>>>()
                .ok_or_else(|| EvalError::Format(format!("line {}: unparsable value", i + 2)))?;
            table
                .insert(word, vector)
                .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 2)))?;
        }
        if table.len() != count {
            return Err(EvalError::Format(format!(
                "header announces {count} words, file holds {}",
                table.len()
            )));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: S = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb: S = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return None;
    }
    Some((dot / (na * nb)).max(-S::one()).min(S::one()))
}
