//! Synthetic persona corpora with known structure.
//!
//! Every profile is drawn from one persona category. Persona-related
//! responses ask about two profile keywords the context has not mentioned;
//! persona-sparse responses are generic replies that share no content word
//! with any profile template. Each small-talk line has its own few fitting
//! replies; after a persona prompt any generic reply can follow.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, CorpusError, DialogueExample, Result, Utterance};
use crate::eval::{is_stop_word, EmbeddingTable};

struct Category {
    name: &'static str,
    keywords: [&'static str; 12],
    /// Profile descriptions, `{}` marks the keyword slot.
    facts: [&'static str; 4],
    /// Things the user says about themselves.
    mentions: [&'static str; 2],
    /// Agent questions about two keywords.
    asks: [&'static str; 2],
}

const CATEGORIES: [Category; 6] = [
    Category {
        name: "hobby",
        keywords: [
            "swimming", "painting", "chess", "hiking", "guitar", "cooking", "gardening", "fishing",
            "dancing", "cycling", "photography", "knitting",
        ],
        facts: ["i like {}", "my hobby is {}", "i practice {} a lot", "i am into {}"],
        mentions: ["i have been doing {} lately", "{} is my favorite pastime"],
        asks: ["do you enjoy {} more than {} ?", "how often do you do {} and {} ?"],
    },
    Category {
        name: "occupation",
        keywords: [
            "nurse", "teacher", "chef", "pilot", "lawyer", "farmer", "plumber", "dentist", "banker",
            "mechanic", "librarian", "firefighter",
        ],
        facts: ["i work as a {}", "my job is {}", "i trained to be a {}", "my mother was a {}"],
        mentions: ["i am a {} by trade", "being a {} keeps me busy"],
        asks: ["would you rather be a {} or a {} ?", "is a {} busier than a {} ?"],
    },
    Category {
        name: "family",
        keywords: [
            "sister", "brother", "grandmother", "twins", "daughter", "son", "husband", "wife",
            "cousin", "uncle", "aunt", "nephew",
        ],
        facts: ["i live with my {}", "my {} is my best friend", "i call my {} daily", "i have a {}"],
        mentions: ["my {} visited me yesterday", "i spent the day with my {}"],
        asks: ["how are your {} and {} doing ?", "do you see your {} or {} often ?"],
    },
    Category {
        name: "location",
        keywords: [
            "paris", "texas", "alaska", "tokyo", "london", "canada", "florida", "berlin", "mexico",
            "ohio", "sydney", "boston",
        ],
        facts: ["i live in {}", "i grew up in {}", "i was born in {}", "i want to move to {}"],
        mentions: ["i just got back from {}", "{} is where i am from"],
        asks: ["is {} nicer than {} ?", "what is the food like in {} and {} ?"],
    },
    Category {
        name: "pet",
        keywords: [
            "dog", "cat", "parrot", "hamster", "rabbit", "turtle", "goldfish", "pony", "lizard",
            "ferret", "snake", "puppy",
        ],
        facts: ["i own a {}", "my {} sleeps on my bed", "i adopted a {}", "i feed my {} twice a day"],
        mentions: ["my {} woke me up early", "i took my {} to the vet"],
        asks: ["does your {} get along with the {} ?", "how old are your {} and {} ?"],
    },
    Category {
        name: "food",
        keywords: [
            "pizza", "sushi", "tacos", "pasta", "curry", "burgers", "salad", "pancakes", "noodles",
            "steak", "dumplings", "waffles",
        ],
        facts: ["i eat {} every week", "my favorite meal is {}", "i can cook {}", "i crave {}"],
        mentions: ["i had {} for dinner", "i could eat {} all day"],
        asks: ["do you prefer {} or {} ?", "where do you get good {} and {} ?"],
    },
];

const OPENERS: [&str; 6] = [
    "hi there how are you",
    "hello nice to meet you",
    "hey what is up",
    "good evening friend",
    "greetings stranger",
    "howdy partner",
];

const AGENT_PROMPTS: [&str; 5] = [
    "what do you do for fun ?",
    "tell me about yourself .",
    "how was your day ?",
    "anything new with you ?",
    "what is on your mind ?",
];

const PERSONA_PROMPTS: [&str; 6] = [
    "ask me something about myself",
    "guess what i care about",
    "you know me pretty well",
    "quiz me about my life",
    "what do you remember about me ?",
    "let us talk about me for once",
];

/// Small-talk lines, each with the generic replies that fit it.
const SMALL_TALK: [(&str, [&str; 4]); 8] = [
    (
        "the weather is lovely today",
        ["that sounds wonderful", "lovely , enjoy the evening", "splendid , cheers", "good for you"],
    ),
    (
        "traffic was terrible this morning",
        ["sorry to hear that", "yikes , bummer", "ah , classic monday", "true , life happens"],
    ),
    (
        "i finished a long shift",
        ["gosh , exhausting", "oh dear , hang in there", "alright , catch you later", "awesome , congrats"],
    ),
    (
        "my internet keeps dropping",
        ["hmm , maybe tomorrow", "okay , understood", "fair point honestly", "no worries at all"],
    ),
    (
        "it rained all afternoon",
        ["ha , same here", "indeed , peculiar times", "that is quite something", "i totally agree"],
    ),
    (
        "i slept really late",
        ["haha , hilarious", "yeah , makes sense", "right , absolutely", "oops , silly mistake"],
    ),
    (
        "the coffee here tastes burnt",
        ["whoa , unexpected", "interesting , go on", "really ? tell me more", "oh wow , amazing"],
    ),
    (
        "my phone battery died again",
        ["nice , glad things worked out", "cool , thanks for sharing", "neat , brilliant idea", "sure , why not"],
    ),
];

fn generic_replies() -> impl Iterator<Item = &'static str> {
    SMALL_TALK.iter().flat_map(|(_, replies)| replies.iter().copied())
}

pub fn category_names(count: usize) -> Vec<&'static str> {
    CATEGORIES.iter().take(count).map(|c| c.name).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub categories: usize,
    pub descriptions: usize,
    /// Fraction of responses that ignore the persona.
    pub sparse_ratio: f64,
    /// Probability that the last user turn invites talk about the user,
    /// given the response is persona-related; the complement applies to
    /// sparse responses. Makes persona-relatedness partly predictable from
    /// context without revealing the category.
    pub cue_strength: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: 4,
            descriptions: 5,
            sparse_ratio: 0.5,
            cue_strength: 0.8,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Input(m));
        if self.categories == 0 || self.categories > CATEGORIES.len() {
            return bad(format!("categories must be in 1..={}", CATEGORIES.len()));
        }
        if self.descriptions == 0 || self.descriptions > 10 {
            return bad("descriptions must be in 1..=10".into());
        }
        if !(0.0..=1.0).contains(&self.sparse_ratio) {
            return bad(format!("sparse ratio {} outside [0, 1]", self.sparse_ratio));
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad(format!("cue strength {} outside [0, 1]", self.cue_strength));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return bad("split sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<DialogueExample>,
    pub dev: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

/// Probability that the first user turn names one profile keyword.
const OPENER_MENTION: f64 = 0.3;

fn fill(template: &str, keyword: &str) -> String {
    template.replace("{}", keyword)
}

fn generate_split(spec: &SynthSpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<DialogueExample> {
    let sparse_count = (spec.sparse_ratio * size as f64).round() as usize;
    let mut sparse = vec![false; size];
    sparse[..sparse_count].iter_mut().for_each(|s| *s = true);
    sparse.shuffle(rng);

    sparse
        .into_iter()
        .map(|is_sparse| {
            let cat = &CATEGORIES[rng.gen_range(0..spec.categories)];
            let chosen: Vec<&str> = cat
                .keywords
                .choose_multiple(rng, spec.descriptions)
                .copied()
                .collect();
            let profile = chosen
                .iter()
                .map(|kw| fill(cat.facts.choose(rng).unwrap(), kw))
                .collect();

            let mut mentioned = HashSet::new();
            let mut context = Vec::new();
            if chosen.len() > 2 && rng.gen_bool(OPENER_MENTION) {
                let kw = chosen[0];
                mentioned.insert(kw);
                context.push(Utterance::user(fill(cat.mentions.choose(rng).unwrap(), kw)));
            } else {
                context.push(Utterance::user(*OPENERS.choose(rng).unwrap()));
            }
            context.push(Utterance::agent(*AGENT_PROMPTS.choose(rng).unwrap()));
            let cue = if is_sparse { 1.0 - spec.cue_strength } else { spec.cue_strength };
            let talk = if rng.gen_bool(cue) {
                context.push(Utterance::user(*PERSONA_PROMPTS.choose(rng).unwrap()));
                SMALL_TALK.choose(rng).unwrap()
            } else {
                let talk = SMALL_TALK.choose(rng).unwrap();
                context.push(Utterance::user(talk.0));
                talk
            };

            let response = if is_sparse {
                talk.1.choose(rng).unwrap().to_string()
            } else {
                let fresh: Vec<&str> = chosen.iter().copied().filter(|k| !mentioned.contains(k)).collect();
                let pool = if fresh.len() < 2 { &chosen } else { &fresh };
                let mut pair: Vec<&str> = pool.choose_multiple(rng, 2).copied().collect();
                if pair.len() == 1 {
                    pair.push(pair[0]);
                }
                let template = cat.asks.choose(rng).unwrap();
                pair.iter().fold(template.to_string(), |t, kw| t.replacen("{}", kw, 1))
            };
            DialogueExample {
                profile,
                context,
                response,
                category: Some(cat.name.to_string()),
            }
        })
        .collect()
}

/// Deterministic train/dev/test corpora for a spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, spec.train, &mut rng);
    let dev = generate_split(spec, spec.dev, &mut rng);
    let test = generate_split(spec, spec.test, &mut rng);
    Ok(CorpusSplits { train, dev, test })
}

fn content_words(text: &str) -> HashSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stop_word(t) && t.chars().any(char::is_alphanumeric))
        .collect()
}

/// Whether the response repeats any non-stop word of the profile.
pub fn shares_profile_keyword(ex: &DialogueExample) -> bool {
    let response = content_words(&ex.response);
    ex.profile.iter().any(|d| !content_words(d).is_disjoint(&response))
}

/// A small non-negative word-vector table over the synthetic vocabulary.
///
/// Keywords of one category share a strong category axis; every other word
/// loads on a separate generic axis. All words carry some random mass on a
/// block of shared noise dimensions, so similarities are graded rather than
/// exactly zero.
pub fn synthetic_embeddings(seed: u64) -> EmbeddingTable<f64> {
    const NOISE_DIMS: usize = 10;
    let dim = CATEGORIES.len() + 1 + NOISE_DIMS;
    let generic_axis = CATEGORIES.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3b);
    let mut table = EmbeddingTable::new(dim);
    let vector = |axis: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        for x in &mut v[CATEGORIES.len() + 1..] {
            *x = 0.35 * rng.gen::<f64>();
        }
        v
    };
    let mut seen = HashSet::new();
    for (axis, cat) in CATEGORIES.iter().enumerate() {
        for kw in cat.keywords {
            seen.insert(kw.to_string());
            table.insert(kw, vector(axis, &mut rng)).expect("fixed dimension");
        }
    }
    let mut others: Vec<String> = CATEGORIES
        .iter()
        .flat_map(|c| c.facts.iter().chain(&c.mentions).chain(&c.asks))
        .copied()
        .chain(OPENERS.iter().chain(&AGENT_PROMPTS).chain(&PERSONA_PROMPTS).copied())
        .chain(SMALL_TALK.iter().map(|(line, _)| *line))
        .chain(generic_replies())
        .flat_map(|t| content_words(&t.replace("{}", " ")))
        .filter(|w| !seen.contains(w))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    others.sort();
    for w in others {
        table.insert(&w, vector(generic_axis, &mut rng)).expect("fixed dimension");
    }
    table
}

/// Content words of the fixed templates. Keyword extraction on synthetic
/// corpora treats them as stop words so only persona slot fillers and
/// generic reply words remain.
pub fn template_stop_words() -> Vec<String> {
    let mut words: Vec<String> = CATEGORIES
        .iter()
        .flat_map(|c| c.facts.iter().chain(&c.mentions).chain(&c.asks))
        .flat_map(|t| content_words(&t.replace("{}", " ")))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    words.sort();
    words
}

#[cfg(test)]
pub(super) fn template_vocabulary() -> (HashSet<String>, HashSet<String>) {
    let profile: HashSet<String> = CATEGORIES
        .iter()
        .flat_map(|c| {
            c.facts
                .iter()
                .map(|t| t.replace("{}", " "))
                .chain(c.keywords.iter().map(|k| k.to_string()))
        })
        .flat_map(|t| content_words(&t))
        .collect();
    let generic: HashSet<String> = generic_replies().flat_map(content_words).collect();
    (profile, generic)
}
