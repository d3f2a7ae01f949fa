//! Synthetic corpora small enough to train on in minutes.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::rng::{Domain, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Lower-case English-like sentences from a small random grammar.
    Char,
    /// First-order Markov chain over 32 states with three successors each.
    Markov,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub vocab: usize,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Symbols of the char corpus, in id order.
pub const CHAR_ALPHABET: &str = " .abcdefghijklmnopqrstuvwxyz";

const MARKOV_STATES: usize = 32;
const MARKOV_WEIGHTS: [f64; 3] = [0.75, 0.15, 0.10];

const DETERMINERS: &[&str] = &["the", "every", "some", "that", "my", "our", "one", "this"];
const PLURAL_DETERMINERS: &[&str] = &["the", "some", "many", "few", "these", "those", "our", "two"];
const ADJECTIVES: &[&str] = &[
    "small", "quick", "green", "quiet", "heavy", "bright", "old", "lazy", "young", "brave", "cold", "dark",
    "gentle", "hungry", "narrow", "proud", "rusty", "silver", "tired", "wild",
];
const NOUNS: &[&str] = &[
    "cat", "river", "engine", "garden", "teacher", "window", "dog", "lamp", "market", "bird", "farmer", "castle",
    "kettle", "ladder", "pilot", "rabbit", "sailor", "tower", "violin", "wagon", "doctor", "forest", "harbor", "mirror",
];
const VERBS: &[&str] = &[
    "see", "move", "like", "find", "hold", "follow", "build", "open", "carry", "help", "paint", "guard", "visit",
    "clean", "pull", "call",
];
const ADVERBS: &[&str] = &["slowly", "often", "never", "quietly", "gladly", "rarely"];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "with", "over", "beside", "across", "inside"];

impl CorpusKind {
    pub fn vocab(self) -> usize {
        match self {
            CorpusKind::Char => CHAR_ALPHABET.len(),
            CorpusKind::Markov => MARKOV_STATES,
        }
    }
}

impl Corpus {
    /// `ln(vocab)` for the Markov corpus, whose transition matrix is doubly
    /// stochastic and whose start state is uniform, so every position is
    /// marginally uniform. `None` for the char corpus.
    pub fn unigram_entropy(&self) -> Option<f64> {
        match self.kind {
            CorpusKind::Markov => Some((MARKOV_STATES as f64).ln()),
            CorpusKind::Char => None,
        }
    }

    /// Entropy of one Markov transition, the best achievable loss.
    pub fn conditional_entropy(&self) -> Option<f64> {
        match self.kind {
            CorpusKind::Markov => Some(-MARKOV_WEIGHTS.iter().map(|w| w * w.ln()).sum::<f64>()),
            CorpusKind::Char => None,
        }
    }
}

/// Generates `size` tokens, the first 90% for training and the rest for
/// validation. `size` must be at least `10 * seq_len`.
pub fn make_corpus(kind: CorpusKind, seed: u64, size: usize, seq_len: usize) -> Result<Corpus, TrainError> {
    if seq_len == 0 || size < 10 * seq_len {
        return Err(TrainError::Config(format!("corpus size {size} is below 10 x sequence length {seq_len}")));
    }
    let mut rng = StreamRng::new(seed, Domain::Corpus, &[kind as u64]);
    let (vocab, tokens) = match kind {
        CorpusKind::Char => (kind.vocab(), char_stream(&mut rng, size)),
        CorpusKind::Markov => (kind.vocab(), markov_stream(&mut rng, size)),
    };
    let split = size - size / 10;
    Ok(Corpus { kind, vocab, train: tokens[..split].to_vec(), valid: tokens[split..].to_vec() })
}

fn pick(rng: &mut StreamRng, words: &[&'static str]) -> &'static str {
    words[rng.below(words.len() as u64) as usize]
}

/// Appends a noun phrase and returns whether it is plural.
fn noun_phrase(rng: &mut StreamRng, text: &mut String) -> bool {
    let plural = rng.below(2) == 0;
    text.push_str(pick(rng, if plural { PLURAL_DETERMINERS } else { DETERMINERS }));
    text.push(' ');
    if rng.below(2) == 0 {
        text.push_str(pick(rng, ADJECTIVES));
        text.push(' ');
    }
    text.push_str(pick(rng, NOUNS));
    if plural {
        text.push('s');
    }
    plural
}

/// Sentences `subject [adverb] verb object [preposition phrase].` whose
/// verb agrees in number with the subject.
fn char_stream(rng: &mut StreamRng, size: usize) -> Vec<usize> {
    let mut text = String::with_capacity(size + 96);
    while text.len() < size {
        let plural = noun_phrase(rng, &mut text);
        text.push(' ');
        if rng.below(3) == 0 {
            text.push_str(pick(rng, ADVERBS));
            text.push(' ');
        }
        text.push_str(pick(rng, VERBS));
        if !plural {
            text.push('s');
        }
        text.push(' ');
        noun_phrase(rng, &mut text);
        if rng.below(2) == 0 {
            text.push(' ');
            text.push_str(pick(rng, PREPOSITIONS));
            text.push(' ');
            noun_phrase(rng, &mut text);
        }
        text.push_str(". ");
    }
    text.bytes().take(size).map(|c| CHAR_ALPHABET.bytes().position(|a| a == c).expect("grammar uses the alphabet")).collect()
}

fn markov_stream(rng: &mut StreamRng, size: usize) -> Vec<usize> {
    let n = MARKOV_STATES;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.below(i as u64 + 1) as usize);
    }
    let mut state = rng.below(n as u64) as usize;
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        out.push(state);
        let u = rng.uniform();
        let mut k = 0;
        let mut acc = MARKOV_WEIGHTS[0];
        while u >= acc && k + 1 < MARKOV_WEIGHTS.len() {
            k += 1;
            acc += MARKOV_WEIGHTS[k];
        }
        state = perm[(state + k) % n];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for kind in [CorpusKind::Char, CorpusKind::Markov] {
            let a = make_corpus(kind, 3, 5000, 64).unwrap();
            assert_eq!(a, make_corpus(kind, 3, 5000, 64).unwrap());
            assert_ne!(a.train, make_corpus(kind, 4, 5000, 64).unwrap().train);
            assert_eq!(a.train.len() + a.valid.len(), 5000);
            assert!(a.train.iter().chain(&a.valid).all(|&t| t < a.vocab));
            assert!(a.vocab <= 256);
        }
    }

    #[test]
    fn rejects_tiny_corpus() {
        assert!(make_corpus(CorpusKind::Char, 0, 639, 64).is_err());
        assert!(make_corpus(CorpusKind::Char, 0, 640, 64).is_ok());
    }

    #[test]
    fn markov_marginal_is_near_uniform() {
        let c = make_corpus(CorpusKind::Markov, 1, 200_000, 64).unwrap();
        let mut counts = vec![0usize; c.vocab];
        c.train.iter().for_each(|&t| counts[t] += 1);
        let p: Vec<f64> = counts.iter().map(|&n| n as f64 / c.train.len() as f64).collect();
        let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        assert!((h - c.unigram_entropy().unwrap()).abs() < 0.01, "{h}");
    }

    #[test]
    fn char_text_reads_like_sentences() {
        let c = make_corpus(CorpusKind::Char, 1, 1000, 16).unwrap();
        let text: String = c.train.iter().map(|&t| CHAR_ALPHABET.as_bytes()[t] as char).collect();
        assert!(text.contains(". "));
        assert!(text.split(' ').filter(|w| !w.is_empty()).all(|w| w.len() < 12));
    }
}
