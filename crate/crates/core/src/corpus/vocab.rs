use std::collections::HashMap;
use std::path::Path;

use super::{CorpusError, DialogueExample, Result};

/// Reserved tokens. Their ids are their discriminants and never move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad = 0,
    Unk = 1,
    Bos = 2,
    Eos = 3,
    Sep = 4,
    Zp = 5,
    Zalpha = 6,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Pad,
        Special::Unk,
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::Zp,
        Special::Zalpha,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Bos => "[BOS]",
            Special::Eos => "[EOS]",
            Special::Sep => "[SEP]",
            Special::Zp => "[Z_p]",
            Special::Zalpha => "[Z_alpha]",
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn is_special(id: usize) -> bool {
        id < Special::ALL.len()
    }
}

/// Lowercases and splits on whitespace; every ASCII punctuation mark
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then corpus tokens by descending frequency
    /// with lexicographic tie-breaking.
    pub fn build(corpus: &[DialogueExample]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CorpusError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in corpus {
            let texts = ex
                .profile
                .iter()
                .map(String::as_str)
                .chain(ex.context.iter().map(|u| u.text.as_str()))
                .chain(std::iter::once(ex.response.as_str()));
            for text in texts {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(
            Special::ALL
                .iter()
                .map(|s| s.token().to_string())
                .chain(words.into_iter().map(|(w, _)| w))
                .collect(),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for s in Special::ALL {
            if tokens.get(s.id()).map(String::as_str) != Some(s.token()) {
                return Err(CorpusError::Input(format!(
                    "vocabulary must start with reserved token {} at id {}",
                    s.token(),
                    s.id()
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Input(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Special::Unk.id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(Special::Unk.token())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
