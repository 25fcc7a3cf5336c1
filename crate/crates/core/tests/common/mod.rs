#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "th", "st", "br", "ch", "sh", "pr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "ee"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "nd", "ll", "ng", "ck"];
const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "on", "by", "at",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

/// Zipf-like index in `0..n`.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.random();
    ((n as f64).powf(u) - 1.0) as usize % n
}

/// Deterministic English-like prose of at least `min_bytes` bytes: a
/// Zipfian lexicon, function words, and a first-order word chain so there
/// is structure beyond unigram statistics.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..1500).map(|_| make_word(&mut rng)).collect();
    // Each word has a few preferred successors.
    let successors: Vec<[usize; 4]> = (0..lexicon.len())
        .map(|_| std::array::from_fn(|_| zipf(&mut rng, lexicon.len())))
        .collect();
    let mut out = String::with_capacity(min_bytes + 256);
    let mut prev = zipf(&mut rng, lexicon.len());
    while out.len() < min_bytes {
        let words = rng.random_range(6..18);
        for i in 0..words {
            let word = if rng.random_bool(0.3) {
                FUNCTION_WORDS[zipf(&mut rng, FUNCTION_WORDS.len())].to_string()
            } else {
                prev = if rng.random_bool(0.7) {
                    successors[prev][rng.random_range(0..4)]
                } else {
                    zipf(&mut rng, lexicon.len())
                };
                lexicon[prev].clone()
            };
            if i == 0 {
                let mut c = word.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.extend(c);
            } else {
                out.push(' ');
                out.push_str(&word);
            }
            if i + 1 < words && rng.random_bool(0.06) {
                out.push(',');
            }
        }
        out.push_str(if rng.random_bool(0.1) { "?" } else { "." });
        out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
    }
    out
}

/// Writes a 1.1 MB corpus into `dir` and returns its path.
pub fn write_corpus(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("corpus.txt");
    std::fs::write(&path, synthetic_text(1_100_000, seed)).unwrap();
    path
}
