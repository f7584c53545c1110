use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{encode, EOS};
use crate::error::{Error, Result};

/// One training sequence: BOS followed by at most `context_len` bytes of a
/// single document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub doc: usize,
    pub tokens: Vec<usize>,
}

/// Padded batch of chunks. Entries past a row's length are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub width: usize,
    pub token_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub doc_ids: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_chunks(chunks: &[&Chunk], width: usize) -> Self {
        let mut token_ids = vec![EOS; chunks.len() * width];
        let mut lengths = Vec::with_capacity(chunks.len());
        let mut doc_ids = Vec::with_capacity(chunks.len());
        for (r, c) in chunks.iter().enumerate() {
            let n = c.tokens.len().min(width);
            token_ids[r * width..r * width + n].copy_from_slice(&c.tokens[..n]);
            lengths.push(n);
            doc_ids.push(c.doc);
        }
        Self { width, token_ids, lengths, doc_ids }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Valid (unpadded) tokens of row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.token_ids[r * self.width..r * self.width + self.lengths[r]]
    }

    /// Full padded row.
    pub fn padded_row(&self, r: usize) -> &[usize] {
        &self.token_ids[r * self.width..(r + 1) * self.width]
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Documents are separated by blank lines.
pub fn split_documents(bytes: &[u8]) -> Vec<&[u8]> {
    let mut docs = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'\n' && bytes[i + 1] == b'\n' {
            if i > start {
                docs.push(&bytes[start..i]);
            }
            while i < bytes.len() && bytes[i] == b'\n' {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        docs.push(&bytes[start..]);
    }
    docs
}

pub fn chunk_documents(docs: &[&[u8]], context_len: usize) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    for (doc, bytes) in docs.iter().enumerate() {
        for piece in bytes.chunks(context_len) {
            chunks.push(Chunk { doc, tokens: encode(piece, true) });
        }
    }
    chunks
}

/// Chunked corpus with seeded per-epoch shuffling.
#[derive(Clone, Debug)]
pub struct CorpusLoader {
    pub context_len: usize,
    pub chunks: Vec<Chunk>,
    seed: u64,
}

impl CorpusLoader {
    pub fn from_bytes(bytes: &[u8], context_len: usize, seed: u64) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::validation("context length must be positive"));
        }
        let docs = split_documents(bytes);
        Ok(Self { context_len, chunks: chunk_documents(&docs, context_len), seed })
    }

    pub fn with_chunks(chunks: Vec<Chunk>, context_len: usize, seed: u64) -> Self {
        Self { context_len, chunks, seed }
    }

    /// Width of a padded row (BOS plus `context_len` bytes).
    pub fn width(&self) -> usize {
        self.context_len + 1
    }

    /// Chunk order for `epoch`; identical for identical seeds.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    pub fn batches(&self, epoch: usize, batch_size: usize) -> impl Iterator<Item = SequenceBatch> + '_ {
        self.batch_indices(epoch, batch_size).into_iter().map(move |idx| self.batch_of(&idx))
    }

    /// Chunk indices of each batch of `epoch`, in order.
    pub fn batch_indices(&self, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch).chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batch_of(&self, indices: &[usize]) -> SequenceBatch {
        let picked: Vec<&Chunk> = indices.iter().map(|&i| &self.chunks[i]).collect();
        SequenceBatch::from_chunks(&picked, self.width())
    }

    /// Split off the last `fraction` of chunks (by position) as a held-out set.
    pub fn split_holdout(mut self, fraction: f64) -> (Self, Self) {
        let n = self.chunks.len();
        let held = ((n as f64) * fraction).round() as usize;
        let rest = self.chunks.split_off(n - held.min(n));
        let holdout = Self { context_len: self.context_len, chunks: rest, seed: self.seed };
        (self, holdout)
    }

    pub fn truncate(&mut self, max_chunks: usize) {
        self.chunks.truncate(max_chunks);
    }
}

/// Read a corpus file and chunk it into sequences of at most
/// `context_len` bytes plus a leading BOS.
pub fn load_corpus(path: &Path, context_len: usize, seed: u64) -> Result<CorpusLoader> {
    let bytes = fs::read(path)?;
    CorpusLoader::from_bytes(&bytes, context_len, seed)
}
