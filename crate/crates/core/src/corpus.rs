//! Synthetic byte-level corpora: the pretraining mix, the downstream shift
//! task, and the three benign fine-tuning distributions used by the
//! fine-tuning attack.
//!
//! Everything here is a pure function of (parameters, seed). Corpora of
//! different sizes with the same seed are prefix-compatible: the first n
//! pairs of a larger corpus equal the n-pair corpus, mirroring how the
//! full-scale benign sets ship in nested sizes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenSeq;
use crate::rng::SeededRng;

/// One prompt/response pair in raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub prompt: Vec<u8>,
    pub response: Vec<u8>,
}

impl QaPair {
    pub fn new(prompt: impl Into<Vec<u8>>, response: impl Into<Vec<u8>>) -> Self {
        QaPair {
            prompt: prompt.into(),
            response: response.into(),
        }
    }

    pub fn seq(&self) -> TokenSeq {
        TokenSeq::from_pair(&self.prompt, &self.response)
    }
}

pub fn to_seqs(pairs: &[QaPair]) -> Vec<TokenSeq> {
    pairs.iter().map(QaPair::seq).collect()
}

const NOUNS: &[&str] = &[
    "river", "stone", "cloud", "ember", "valley", "harbor", "meadow", "signal",
    "copper", "lantern", "orchard", "compass", "saddle", "thicket", "quarry",
    "bridge", "cinder", "hollow", "marsh", "summit", "anchor", "willow",
    "garnet", "mill",
];
const VERBS: &[&str] = &[
    "carry", "polish", "gather", "measure", "fold", "stack", "trace", "mend",
    "weigh", "sort", "wrap", "sketch",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "amber", "hollow", "bright", "narrow", "mossy", "steep", "pale",
    "brisk", "worn", "deep", "round",
];
const NAMES: &[&str] = &[
    "mira", "oskar", "lena", "tomas", "petra", "ivo", "sanja", "ruben",
];

fn pick<'a>(rng: &mut SeededRng, pool: &[&'a str]) -> &'a str {
    pool[rng.next_below(pool.len())]
}

/// Bytes of the raw-echo pair at the given ordinal: an 8-byte window that
/// walks the whole 0..=255 range as the ordinal grows.
fn raw_window(ordinal: usize) -> Vec<u8> {
    (0..8).map(|k| ((ordinal * 8 + k) % 256) as u8).collect()
}

/// General-purpose pretraining mix: echo, concatenation, single-digit sums,
/// short greetings, raw-byte echoes, and word-successor pairs.
///
/// Every fourth pair (offset 3) is a raw-byte echo whose window walks the
/// full byte range, so from 128 pairs on every byte value has been seen a
/// handful of times. That mirrors a real vocabulary, where rare tokens are
/// under-trained but never untouched; with truly unseen bytes the output
/// head rows for a fingerprint target would stay at random init, frozen
/// under adapter-only training, and no trigger could ever win the softmax.
///
/// Every fourth pair (offset 1) is a word-successor pair, the same mapping
/// the downstream task tests. Base checkpoints therefore already hold the
/// downstream ability in rough form, and deriving a downstream checkpoint
/// is a light specialization pass rather than a from-scratch retrain. The
/// large-scale counterpart is the same: chat and instruction tunes sharpen
/// abilities the base model already has, and it is exactly that closeness
/// that makes adapters trained on the base meaningful on the derivative.
pub fn pretrain_corpus(n: usize, seed: u64) -> Vec<QaPair> {
    let mut rng = SeededRng::new(seed).derive("corpus/pretrain");
    (0..n)
        .map(|i| {
            if i % 4 == 3 {
                let bytes = raw_window(i / 4);
                let mut prompt = b"raw ".to_vec();
                prompt.extend_from_slice(&bytes);
                return QaPair::new(prompt, bytes);
            }
            if i % 4 == 1 {
                let word: Vec<u8> = (0..DOWNSTREAM_WORD_LEN)
                    .map(|_| b'a' + rng.next_below(26) as u8)
                    .collect();
                return QaPair::new(word.clone(), shift_word(&word));
            }
            match rng.next_below(4) {
                0 => {
                    let w = pick(&mut rng, NOUNS);
                    QaPair::new(format!("say {w}"), w)
                }
                1 => {
                    let a = pick(&mut rng, ADJECTIVES);
                    let b = pick(&mut rng, NOUNS);
                    QaPair::new(format!("join {a} {b}"), format!("{a}{b}"))
                }
                2 => {
                    let x = rng.next_below(5);
                    let y = rng.next_below(5);
                    QaPair::new(format!("add {x} {y}"), format!("{}", x + y))
                }
                _ => {
                    let name = pick(&mut rng, NAMES);
                    QaPair::new(format!("hi {name}"), format!("hello {name}"))
                }
            }
        })
        .collect()
}

pub const DOWNSTREAM_WORD_LEN: usize = 4;

/// Per-byte successor within a..z, wrapping z back to a; other bytes pass
/// through unchanged.
pub fn shift_word(word: &[u8]) -> Vec<u8> {
    word.iter()
        .map(|&b| {
            if b.is_ascii_lowercase() {
                b'a' + (b - b'a' + 1) % 26
            } else {
                b
            }
        })
        .collect()
}

/// The downstream task: map a fixed-length lowercase word to its per-byte
/// successor. Generalizes across unseen words, so the held-out benchmark
/// measures real task performance rather than memorization. Returns
/// (training set, held-out benchmark) with disjoint prompts.
pub fn downstream_task(n_train: usize, n_eval: usize, seed: u64) -> (Vec<QaPair>, Vec<QaPair>) {
    let mut rng = SeededRng::new(seed).derive("corpus/downstream");
    let mut seen = std::collections::BTreeSet::new();
    let mut pairs = Vec::with_capacity(n_train + n_eval);
    while pairs.len() < n_train + n_eval {
        let word: Vec<u8> = (0..DOWNSTREAM_WORD_LEN)
            .map(|_| b'a' + rng.next_below(26) as u8)
            .collect();
        if !seen.insert(word.clone()) {
            continue;
        }
        let shifted = shift_word(&word);
        pairs.push(QaPair::new(word, shifted));
    }
    let eval = pairs.split_off(n_train);
    (pairs, eval)
}

/// The three benign fine-tuning distributions, toy analogs of the common
/// public instruction-tuning sets they are named after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenignStyle {
    /// Instruction-formatted commands.
    Alpaca,
    /// Conversational turns.
    Sharegpt,
    /// Context paragraph plus a question.
    Dolly,
}

impl BenignStyle {
    pub const ALL: [BenignStyle; 3] = [
        BenignStyle::Alpaca,
        BenignStyle::Sharegpt,
        BenignStyle::Dolly,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            BenignStyle::Alpaca => "alpaca",
            BenignStyle::Sharegpt => "sharegpt",
            BenignStyle::Dolly => "dolly",
        }
    }
}

impl std::str::FromStr for BenignStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenignStyle::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| {
                Error::argument(format!(
                    "unknown benign style `{s}` (expected alpaca, sharegpt, or dolly)"
                ))
            })
    }
}

impl std::fmt::Display for BenignStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

pub fn benign_corpus(style: BenignStyle, n: usize, seed: u64) -> Vec<QaPair> {
    let mut rng = SeededRng::new(seed).derive(&format!("corpus/benign/{}", style.id()));
    (0..n)
        .map(|_| match style {
            BenignStyle::Alpaca => {
                let v = pick(&mut rng, VERBS);
                let o = pick(&mut rng, NOUNS);
                QaPair::new(
                    format!("instruct: {v} the {o}"),
                    format!("done: {v} {o}"),
                )
            }
            BenignStyle::Sharegpt => {
                let name = pick(&mut rng, NAMES);
                let topic = pick(&mut rng, NOUNS);
                QaPair::new(
                    format!("user {name}: tell me about {topic}"),
                    format!("{topic} is fine, {name}"),
                )
            }
            BenignStyle::Dolly => {
                let subject = pick(&mut rng, NOUNS);
                let quality = pick(&mut rng, ADJECTIVES);
                QaPair::new(
                    format!("ctx: the {subject} is {quality}. q: how is the {subject}?"),
                    quality,
                )
            }
        })
        .collect()
}

/// Occurrence count of each byte value over all prompts and responses.
pub fn byte_frequencies(pairs: &[QaPair]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for pair in pairs {
        for &b in pair.prompt.iter().chain(&pair.response) {
            counts[b as usize] += 1;
        }
    }
    counts
}

/// The k lowest-frequency byte values, ties broken by ascending byte value.
/// Bytes absent from the corpus count as frequency zero, so an ASCII-only
/// corpus yields low control bytes first.
pub fn rarest_bytes(counts: &[u64; 256], k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > 256 {
        return Err(Error::argument(format!("k {k} out of range 1..=256")));
    }
    let mut order: Vec<u8> = (0..=255).collect();
    order.sort_by_key(|&b| (counts[b as usize], b));
    order.truncate(k);
    Ok(order)
}

/// Content hash over the pair list (length-prefixed bytes), for provenance
/// records in datasets and manifests.
pub fn corpus_hash(pairs: &[QaPair]) -> String {
    let mut hasher = Sha256::new();
    for pair in pairs {
        hasher.update((pair.prompt.len() as u64).to_le_bytes());
        hasher.update(&pair.prompt);
        hasher.update((pair.response.len() as u64).to_le_bytes());
        hasher.update(&pair.response);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
