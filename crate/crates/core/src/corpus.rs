//! Byte-level tokenization and random-window batch sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reserved end-of-text id.
pub const EOT: usize = 256;
pub const VOCAB_SIZE: usize = 257;

/// One id per byte plus an end-of-text sentinel.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<usize> {
        text.iter().map(|&b| usize::from(b)).collect()
    }

    /// EOT renders as nothing; ids past the vocabulary are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                EOT => {}
                _ => {
                    return Err(Error::Index {
                        what: "token id",
                        index: id,
                        limit: VOCAB_SIZE,
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Input/target windows, `[batch][seq_len]` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn flat_targets(&self) -> Vec<usize> {
        self.targets.concat()
    }
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.95;

/// Token ids with a train/validation split point.
#[derive(Clone, Debug)]
pub struct TokenStream {
    ids: Vec<usize>,
    split: usize,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Data(format!(
                "train fraction {train_fraction} must lie in (0, 1)"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                limit: VOCAB_SIZE,
            });
        }
        let split = (ids.len() as f64 * train_fraction).floor() as usize;
        Ok(TokenStream { ids, split })
    }

    pub fn from_bytes(text: &[u8]) -> Result<Self> {
        TokenStream::new(ByteTokenizer.encode(text), DEFAULT_TRAIN_FRACTION)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TokenStream::from_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.ids[self.split..]
    }
}

/// Samples `batch` random contiguous windows of length `seq_len` from
/// `tokens`. The result depends only on `(seed, step)`.
pub fn next_batch(
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
    seed: u64,
    step: u64,
) -> Result<Batch> {
    if seq_len == 0 || batch == 0 {
        return Err(Error::Data("batch and seq_len must be positive".into()));
    }
    if tokens.len() <= seq_len + 1 {
        return Err(Error::Data(format!(
            "token stream of length {} too short for windows of {}",
            tokens.len(),
            seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let max_start = tokens.len() - seq_len - 1;
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let start = rng.random_range(0..=max_start);
        inputs.push(tokens[start..start + seq_len].to_vec());
        targets.push(tokens[start + 1..start + seq_len + 1].to_vec());
    }
    Ok(Batch { inputs, targets })
}

/// Non-overlapping evaluation windows covering `tokens` (a trailing partial
/// window is dropped unless it is the only one).
pub fn eval_windows(tokens: &[usize], seq_len: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if tokens.len() < 2 {
        return Err(Error::Data("evaluation stream needs at least two tokens".into()));
    }
    let usable = tokens.len() - 1;
    if usable < seq_len {
        return Ok(vec![(tokens[..usable].to_vec(), tokens[1..].to_vec())]);
    }
    Ok((0..usable / seq_len)
        .map(|w| {
            let s = w * seq_len;
            (tokens[s..s + seq_len].to_vec(), tokens[s + 1..s + seq_len + 1].to_vec())
        })
        .collect())
}
