//! Binary checkpoint format shared by target and draft models.
//!
//! ```text
//! "BGLE" | version u32 | role u8 | d, H, L_t, T_max, |V| (u32 each)
//! count u32 | count × (name_len u32, name, ndim u32, dims u32…, f32 data)
//! crc32 u32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{DraftHead, ModelConfig, NamedParams, TargetModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGLE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    Target = 0,
    Draft = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: ModelRole,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(role: ModelRole, config: ModelConfig) -> Self {
        Self { role, config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> NamedParams<f32> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), Arc::new(t.clone()))))
            .collect()
    }

    /// Store UTF-8 text as a byte-valued tensor.
    pub fn push_text(&mut self, name: &str, text: &str) {
        let data: Vec<f32> = text.bytes().map(f32::from).collect();
        if !data.is_empty() {
            self.push(name, Tensor::vector(data));
        }
    }

    pub fn text(&self, name: &str) -> Option<String> {
        let t = self.get(name)?;
        let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.role as u8);
        let c = &self.config;
        for v in [c.d, c.heads, c.target_layers, c.t_max, c.vocab] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 1 + 20 + 4 + 4 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let role = match r.take(1)?[0] {
            0 => ModelRole::Target,
            1 => ModelRole::Draft,
            b => return Err(Error::Format(format!("unknown role byte {b}"))),
        };
        let config = ModelConfig {
            d: r.u32()? as usize,
            heads: r.u32()? as usize,
            target_layers: r.u32()? as usize,
            t_max: r.u32()? as usize,
            vocab: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensor table".into()));
        }
        Ok(Self { role, config, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_target(model: &TargetModel<f32>) -> Self {
        let mut c = Self::new(ModelRole::Target, model.config);
        for (n, t) in model.named_params() {
            c.push(format!("param.{n}"), (*t).clone());
        }
        c
    }

    pub fn from_draft(head: &DraftHead<f32>) -> Self {
        let mut c = Self::new(ModelRole::Draft, head.config);
        for (n, t) in head.named_params() {
            c.push(format!("param.{n}"), (*t).clone());
        }
        c
    }

    pub fn to_target(&self) -> Result<TargetModel<f32>> {
        self.expect_role(ModelRole::Target)?;
        let mut m = TargetModel::zeros(self.config)?;
        m.load(&self.with_prefix("param."))?;
        Ok(m)
    }

    pub fn to_draft(&self) -> Result<DraftHead<f32>> {
        self.expect_role(ModelRole::Draft)?;
        let mut h = DraftHead::zeros(self.config)?;
        h.load(&self.with_prefix("param."))?;
        Ok(h)
    }

    fn expect_role(&self, role: ModelRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Format(format!("checkpoint holds a {:?} model, expected {:?}", self.role, role)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { d: 8, heads: 2, target_layers: 2, t_max: 16, vocab: 10 }
    }

    #[test]
    fn target_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = TargetModel::<f32>::init(cfg(), &mut rng).unwrap();
        let ck = Checkpoint::from_target(&m);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_target().unwrap();
        assert_eq!(m2.forward(&[1, 2, 3]).unwrap().logits, m.forward(&[1, 2, 3]).unwrap().logits);
        assert!(back.to_draft().is_err());
    }

    #[test]
    fn header_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = DraftHead::<f32>::init(cfg(), &mut rng).unwrap();
        let bytes = Checkpoint::from_draft(&h).to_bytes();
        assert_eq!(&bytes[..4], b"BGLE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 10);
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
    }

    #[test]
    fn corruption_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = DraftHead::<f32>::init(cfg(), &mut rng).unwrap();
        let mut bytes = Checkpoint::from_draft(&h).to_bytes();
        bytes[40] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn text_entries() {
        let mut c = Checkpoint::new(ModelRole::Draft, cfg());
        c.push_text("meta.config", "k = 5\n");
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.text("meta.config").unwrap(), "k = 5\n");
    }
}
