//! Dialogue data: examples, tokenization, sequence layouts, file formats
//! and the synthetic persona corpus.

mod encode;
mod jsonl;
mod synth;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encode::{decode_to_text, EncodedSequence, Encoder, EMPTY_POSITION};
pub use jsonl::{convert_persona_chat, load_jsonl, parse_jsonl, to_jsonl, write_jsonl};
pub use synth::{
    category_names, generate_synthetic, shares_profile_keyword, synthetic_embeddings,
    template_stop_words,
    CorpusSplits, SynthSpec,
};
pub use vocab::{tokenize, Special, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid example: {0}")]
    Invalid(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    /// The other party, whose persona the profile describes.
    User,
    /// The dialogue agent that produces responses.
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Agent,
            text: text.into(),
        }
    }
}

/// One (profile, context, response) triple. The profile describes the
/// user; the response is spoken by the agent to the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub profile: Vec<String>,
    pub context: Vec<Utterance>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.profile.is_empty() || self.profile.iter().any(|d| tokenize(d).is_empty()) {
            return Err(CorpusError::Invalid("profile must hold non-empty descriptions".into()));
        }
        if self.context.is_empty() || self.context.iter().any(|u| tokenize(&u.text).is_empty()) {
            return Err(CorpusError::Invalid("context must hold non-empty utterances".into()));
        }
        if tokenize(&self.response).is_empty() {
            return Err(CorpusError::Invalid("response is empty".into()));
        }
        if self.context.last().map(|u| u.speaker) != Some(Speaker::User) {
            return Err(CorpusError::Invalid("last context utterance must come from the user".into()));
        }
        Ok(())
    }
}

pub type Corpus = Vec<DialogueExample>;
