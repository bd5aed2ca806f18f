//! Byte tokenizer, synthetic corpora and the window/batch stream.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ApexError, Result};
use crate::numerics::rng;

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const UNK: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Token ids of one or more byte documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    /// FNV-1a over the source bytes.
    pub digest: u64,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Identity byte mapping with `BOS` opening the document.
pub fn tokenize_bytes(bytes: &[u8]) -> Corpus {
    tokenize_documents(&[bytes])
}

pub fn tokenize_documents(docs: &[&[u8]]) -> Corpus {
    let mut tokens = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    let mut digest = FNV_OFFSET;
    for doc in docs {
        tokens.push(BOS);
        tokens.extend(doc.iter().map(|&b| b as usize));
        digest = fnv1a(doc, digest);
    }
    Corpus { tokens, digest }
}

/// Bytes back from ids; reserved ids are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

const PHRASES: [&str; 12] = [
    "the cat sat on the mat. ",
    "a dog ran in the park. ",
    "birds sing at dawn. ",
    "rain falls on the roof. ",
    "the sun sets in the west. ",
    "fish swim in the sea. ",
    "wind moves the tall grass. ",
    "stars shine over the hill. ",
    "snow covers the old road. ",
    "bees hum near the flowers. ",
    "the river runs to the sea. ",
    "leaves drop in the fall. ",
];

/// Seeded repeating-phrase text of at least `min_tokens` tokens.
///
/// Phrases are drawn uniformly, so only the first byte of each phrase is
/// uncertain and a small model can drive the loss well below one nat.
pub fn synthetic_corpus(min_tokens: usize, seed: u64) -> Corpus {
    let mut r = rng::seeded(seed);
    let mut text = Vec::with_capacity(min_tokens + 32);
    while text.len() + 1 < min_tokens {
        text.extend_from_slice(PHRASES[r.random_range(0..PHRASES.len())].as_bytes());
    }
    tokenize_bytes(&text)
}

/// Leading `train_fraction` of the tokens for training, the rest for evaluation.
pub fn split_train_eval(tokens: &[usize], train_fraction: f64) -> (&[usize], &[usize]) {
    let cut = ((tokens.len() as f64) * train_fraction).floor() as usize;
    tokens.split_at(cut.min(tokens.len()))
}

/// Non-overlapping windows of `seq_len + 1` tokens; the trailing partial window is dropped.
pub fn windows(tokens: &[usize], seq_len: usize) -> Result<Vec<&[usize]>> {
    if seq_len == 0 || tokens.len() <= seq_len {
        return Err(ApexError::Data(format!(
            "corpus of {} tokens too short for seq_len {seq_len}",
            tokens.len()
        )));
    }
    Ok(tokens.chunks_exact(seq_len + 1).collect())
}

/// Endless seeded stream of batches, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    windows: Vec<&'a [usize]>,
    order: Vec<usize>,
    batch: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(tokens: &'a [usize], seq_len: usize, batch: usize, seed: u64, shuffle: bool) -> Result<Self> {
        let windows = windows(tokens, seq_len)?;
        if batch == 0 || windows.len() < batch {
            return Err(ApexError::Data(format!("{} windows cannot fill a batch of {batch}", windows.len())));
        }
        let mut s = Self { order: Vec::new(), windows, batch, seed, shuffle, epoch: 0, cursor: 0 };
        s.reorder();
        Ok(s)
    }

    fn reorder(&mut self) {
        self.order = (0..self.windows.len()).collect();
        if self.shuffle {
            self.order.shuffle(&mut rng::derive(self.seed, self.epoch));
        }
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows.len() / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch; a new epoch starts once fewer than `batch` windows remain.
    pub fn next_batch(&mut self) -> Vec<&'a [usize]> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.reorder();
        }
        let out = self.order[self.cursor..self.cursor + self.batch].iter().map(|&i| self.windows[i]).collect();
        self.cursor += self.batch;
        out
    }
}

/// One epoch of batches (`floor(windows / batch)` of them).
pub fn batch_iter(
    tokens: &[usize],
    seq_len: usize,
    batch: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<&[usize]>>> {
    let mut s = BatchStream::new(tokens, seq_len, batch, seed, shuffle)?;
    Ok((0..s.batches_per_epoch()).map(|_| s.next_batch()).collect())
}
