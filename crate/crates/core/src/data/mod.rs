//! Byte-level tokenization, corpus chunking and the target-state cache.

mod corpus;
mod state_cache;
pub mod toy;

pub use corpus::{chunk_documents, load_corpus, split_documents, Chunk, CorpusLoader, SequenceBatch};
pub use state_cache::{checkpoint_hash, StateCache, StateCacheEntry};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
/// 256 byte tokens plus BOS and EOS.
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &[u8], add_bos: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + usize::from(add_bos));
    if add_bos {
        ids.push(BOS);
    }
    ids.extend(text.iter().map(|&b| b as usize));
    ids
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn decode_lossy(ids: &[usize]) -> String {
    String::from_utf8_lossy(&decode(ids)).into_owned()
}
