use serde::{Deserialize, Serialize};

use super::{DialogueExample, Special, Speaker, Utterance, Vocab};

/// Position id reserved for latent slots; its embedding row stays zero.
pub const EMPTY_POSITION: usize = 0;

/// Four aligned id sequences fed to an encoder or the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// 1 for tokens spoken by the other party, 0 otherwise.
    pub roles: Vec<usize>,
    /// Set on positions whose token is a prediction target.
    pub loss_mask: Vec<bool>,
}

impl EncodedSequence {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            positions: Vec::new(),
            roles: Vec::new(),
            loss_mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push_latent(&mut self, slot: Special) {
        self.tokens.push(slot.id());
        self.positions.push(EMPTY_POSITION);
        self.roles.push(0);
        self.loss_mask.push(false);
    }

    fn push(&mut self, token: usize, role: usize, target: bool) {
        let next = self.positions.iter().copied().max().unwrap_or(EMPTY_POSITION) + 1;
        self.tokens.push(token);
        self.positions.push(next);
        self.roles.push(role);
        self.loss_mask.push(target);
    }

    /// `[BOS] seg₁ [SEP] seg₂ [SEP] … [EOS]`
    fn push_segments<'a>(&mut self, vocab: &Vocab, segments: impl Iterator<Item = (&'a str, usize)>) {
        self.push(Special::Bos.id(), 0, false);
        for (text, role) in segments {
            for id in vocab.encode_text(text) {
                self.push(id, role, false);
            }
            self.push(Special::Sep.id(), 0, false);
        }
        self.push(Special::Eos.id(), 0, false);
    }

    /// Appends one agent-side token as a prediction target, continuing the
    /// position count.
    pub fn push_target(&mut self, token: usize) {
        self.push(token, 0, true);
    }

    /// Index of the first position whose token equals `slot`.
    pub fn slot_index(&self, slot: Special) -> Option<usize> {
        self.tokens.iter().position(|&t| t == slot.id())
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.tokens.len();
        self.positions.len() == n && self.roles.len() == n && self.loss_mask.len() == n
    }
}

fn role_of(u: &Utterance) -> usize {
    match u.speaker {
        Speaker::User => 1,
        Speaker::Agent => 0,
    }
}

/// Builds the input layouts of every network from one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    /// Number of trailing context utterances kept.
    pub context_window: usize,
}

impl Default for Encoder {
    fn default() -> Self {
        Self { context_window: 4 }
    }
}

impl Encoder {
    fn window<'a>(&self, context: &'a [Utterance]) -> &'a [Utterance] {
        let start = context.len().saturating_sub(self.context_window.max(1));
        &context[start..]
    }

    fn push_context(&self, seq: &mut EncodedSequence, vocab: &Vocab, context: &[Utterance]) {
        let window = self.window(context);
        seq.push_segments(vocab, window.iter().map(|u| (u.text.as_str(), role_of(u))));
    }

    /// `[Z_p] [BOS] utt₁ [SEP] utt₂ [SEP] … [EOS]`
    pub fn prior_zp(&self, vocab: &Vocab, context: &[Utterance]) -> EncodedSequence {
        let mut seq = EncodedSequence::new();
        seq.push_latent(Special::Zp);
        self.push_context(&mut seq, vocab, context);
        seq
    }

    /// `[Z_p] [BOS] desc₁ [SEP] desc₂ [SEP] … [EOS]`, no role marks.
    pub fn posterior_zp(&self, vocab: &Vocab, profile: &[String]) -> EncodedSequence {
        let mut seq = EncodedSequence::new();
        seq.push_latent(Special::Zp);
        seq.push_segments(vocab, profile.iter().map(|d| (d.as_str(), 0)));
        seq
    }

    /// `z_p slot, [Z_alpha], [BOS] context [EOS]`
    pub fn fader_prior(&self, vocab: &Vocab, context: &[Utterance]) -> EncodedSequence {
        let mut seq = EncodedSequence::new();
        seq.push_latent(Special::Zp);
        seq.push_latent(Special::Zalpha);
        self.push_context(&mut seq, vocab, context);
        seq
    }

    /// Decoder prompt used at inference: the latent slots and the context.
    pub fn decoder_prompt(&self, vocab: &Vocab, context: &[Utterance]) -> EncodedSequence {
        self.fader_prior(vocab, context)
    }

    /// Decoder training layout: prompt followed by `response [EOS]`, with the
    /// loss mask on the response tokens and the closing `[EOS]`.
    pub fn decoder(&self, vocab: &Vocab, context: &[Utterance], response: &str) -> EncodedSequence {
        let mut seq = self.decoder_prompt(vocab, context);
        for id in vocab.encode_text(response) {
            seq.push(id, 0, true);
        }
        seq.push(Special::Eos.id(), 0, true);
        seq
    }

    pub fn all(&self, vocab: &Vocab, ex: &DialogueExample) -> [EncodedSequence; 4] {
        [
            self.prior_zp(vocab, &ex.context),
            self.posterior_zp(vocab, &ex.profile),
            self.fader_prior(vocab, &ex.context),
            self.decoder(vocab, &ex.context, &ex.response),
        ]
    }
}

/// Space-joined tokens with every reserved token dropped.
pub fn decode_to_text(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| !Special::is_special(id))
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
