use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;

const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "ain", "all", "also", "am", "an", "and",
    "any", "are", "aren't", "as", "at", "be", "because", "been", "before", "being", "below",
    "between", "both", "but", "by", "can", "could", "couldn't", "did", "didn't", "do", "does",
    "doesn't", "doing", "don't", "down", "during", "each", "few", "for", "from", "further", "get",
    "got", "had", "hadn't", "has", "hasn't", "have", "haven't", "having", "he", "her", "here",
    "hers", "herself", "him", "himself", "his", "how", "i", "i'm", "if", "in", "into", "is",
    "isn't", "it", "it's", "its", "itself", "just", "let's", "me", "more", "most", "my", "myself",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than",
    "that", "that's", "the", "their", "theirs", "them", "themselves", "then", "there", "these",
    "they", "this", "those", "through", "to", "too", "under", "until", "up", "very", "was",
    "wasn't", "we", "were", "weren't", "what", "when", "where", "which", "while", "who", "whom",
    "why", "will", "with", "won't", "would", "you", "you're", "your", "yours", "yourself",
    "yourselves",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Picks the keywords of a text: non-stop words that rank among the most
/// frequent content words of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordExtractor {
    extra_stop_words: HashSet<String>,
    /// Content word -> frequency rank (0 = most frequent) in the training set.
    ranks: HashMap<String, usize>,
    /// Fraction of ranked content words eligible as keywords.
    pub rank_cutoff: f64,
    pub per_text_cap: usize,
}

impl KeywordExtractor {
    pub fn fit<'a>(
        training_texts: impl IntoIterator<Item = &'a str>,
        extra_stop_words: impl IntoIterator<Item = String>,
    ) -> Self {
        let extra_stop_words: HashSet<String> = extra_stop_words.into_iter().collect();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in training_texts {
            for tok in tokenize(text) {
                if Self::is_content(&extra_stop_words, &tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let ranks = words.into_iter().enumerate().map(|(r, (w, _))| (w, r)).collect();
        Self {
            extra_stop_words,
            ranks,
            rank_cutoff: 0.4,
            per_text_cap: 5,
        }
    }

    fn is_content(extra: &HashSet<String>, tok: &str) -> bool {
        tok.chars().any(char::is_alphabetic) && !is_stop_word(tok) && !extra.contains(tok)
    }

    pub fn is_stop(&self, word: &str) -> bool {
        !Self::is_content(&self.extra_stop_words, word)
    }

    fn eligible_ranks(&self) -> usize {
        (self.rank_cutoff * self.ranks.len() as f64).ceil() as usize
    }

    pub fn rank(&self, word: &str) -> Option<usize> {
        self.ranks.get(word).copied()
    }

    /// Distinct eligible words of `text`, most frequent first, capped.
    pub fn extract(&self, text: &str) -> Vec<String> {
        let limit = self.eligible_ranks();
        let mut seen = HashSet::new();
        let mut found: Vec<(usize, String)> = tokenize(text)
            .into_iter()
            .filter(|t| !self.is_stop(t))
            .filter_map(|t| self.rank(&t).filter(|&r| r < limit).map(|r| (r, t)))
            .filter(|(_, t)| seen.insert(t.clone()))
            .collect();
        found.sort();
        found.into_iter().take(self.per_text_cap).map(|(_, t)| t).collect()
    }
}
