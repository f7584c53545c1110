//! Precomputed target states and logits.
//!
//! ```text
//! "BGSC" | version u32 | checkpoint sha256 (32 bytes) | d u32 | |V| u32
//! count u32 | count × (doc u32, len u32, offset u64)
//! f32 payload: per entry, len × d states then len × |V| logits
//! ```
//! `offset` counts f32 values from the start of the payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Chunk;
use crate::error::{Error, Result};
use crate::models::{Checkpoint, TargetModel};
use crate::tensor::Tensor;

pub const STATE_CACHE_MAGIC: &[u8; 4] = b"BGSC";
pub const STATE_CACHE_VERSION: u32 = 1;

/// SHA-256 of a checkpoint's serialized bytes.
pub fn checkpoint_hash(ck: &Checkpoint) -> [u8; 32] {
    Sha256::digest(ck.to_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateCacheEntry {
    pub doc: usize,
    /// Top-layer target states `[len × d]`.
    pub states: Tensor<f32>,
    /// Target logits `[len × V]`.
    pub logits: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateCache {
    pub hash: [u8; 32],
    pub d: usize,
    pub vocab: usize,
    pub entries: Vec<StateCacheEntry>,
}

impl StateCache {
    pub fn build(target: &TargetModel<f32>, chunks: &[Chunk]) -> Result<Self> {
        let hash = checkpoint_hash(&Checkpoint::from_target(target));
        let mut entries = Vec::with_capacity(chunks.len());
        for c in chunks {
            let out = target.forward(&c.tokens)?;
            entries.push(StateCacheEntry { doc: c.doc, states: out.states, logits: out.logits });
        }
        Ok(Self { hash, d: target.config.d, vocab: target.config.vocab, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stored scalars, states and logits together.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.states.numel() + e.logits.numel()).sum()
    }

    /// Fail unless the cache was produced by `target`.
    pub fn check(&self, target: &TargetModel<f32>) -> Result<()> {
        let want = checkpoint_hash(&Checkpoint::from_target(target));
        if want != self.hash {
            return Err(Error::StaleCache("state cache was built from a different target checkpoint".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.scalar_count());
        out.extend_from_slice(STATE_CACHE_MAGIC);
        out.extend_from_slice(&STATE_CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.hash);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.doc as u32).to_le_bytes());
            out.extend_from_slice(&(e.states.rows() as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (e.states.numel() + e.logits.numel()) as u64;
        }
        for e in &self.entries {
            for v in e.states.data().iter().chain(e.logits.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a cache and require it to match `expected_hash`.
    pub fn from_bytes(bytes: &[u8], expected_hash: &[u8; 32]) -> Result<Self> {
        let header = 4 + 4 + 32 + 12;
        if bytes.len() < header {
            return Err(Error::Format("state cache is truncated".into()));
        }
        if &bytes[..4] != STATE_CACHE_MAGIC {
            return Err(Error::Format("bad state cache magic".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if u32_at(4) != STATE_CACHE_VERSION as usize {
            return Err(Error::Format(format!("unsupported state cache version {}", u32_at(4))));
        }
        let hash: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
        if &hash != expected_hash {
            return Err(Error::StaleCache("state cache hash does not match the target checkpoint".into()));
        }
        let (d, vocab, count) = (u32_at(40), u32_at(44), u32_at(48));
        let table_end = header + count * 16;
        if bytes.len() < table_end {
            return Err(Error::Format("state cache index is truncated".into()));
        }
        let payload = &bytes[table_end..];
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let at = header + i * 16;
            let doc = u32_at(at);
            let len = u32_at(at + 4);
            let offset = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().expect("8 bytes")) as usize;
            let n_states = len * d;
            let n_logits = len * vocab;
            let end = (offset + n_states + n_logits) * 4;
            if end > payload.len() {
                return Err(Error::Format(format!("state cache entry {i} runs past the payload")));
            }
            let floats: Vec<f32> = payload[offset * 4..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let states = Tensor::matrix(len, d, floats[..n_states].to_vec())?;
            let logits = Tensor::matrix(len, vocab, floats[n_states..].to_vec())?;
            entries.push(StateCacheEntry { doc, states, logits });
        }
        Ok(Self { hash, d, vocab, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, target: &TargetModel<f32>) -> Result<Self> {
        let hash = checkpoint_hash(&Checkpoint::from_target(target));
        Self::from_bytes(&fs::read(path)?, &hash)
    }
}
