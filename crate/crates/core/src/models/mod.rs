//! The frozen target language model and the cross-attention draft head.

mod checkpoint;
mod draft;
mod kv;
mod target;

use std::sync::Arc;

pub use checkpoint::{Checkpoint, ModelRole, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use draft::{DraftHead, DraftVars};
pub use kv::{DraftStep, KvCache};
pub use target::{TargetCache, TargetModel, TargetOutput, TargetVars};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Model width `d`.
    pub d: usize,
    /// Attention heads `H`; head width is `d / H`.
    pub heads: usize,
    /// Target transformer blocks.
    pub target_layers: usize,
    /// Longest sequence the target accepts.
    pub t_max: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 128, heads: 4, target_layers: 4, t_max: 512, vocab: crate::data::VOCAB_SIZE }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.vocab == 0 || self.t_max == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::validation(format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::validation("head width must be even for rotary encoding"));
        }
        Ok(())
    }
}

/// Named parameter list in a fixed order.
pub type NamedParams<S> = Vec<(String, Arc<Tensor<S>>)>;

pub(crate) fn init_matrix<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Arc<Tensor<S>> {
    Arc::new(Tensor::randn(&[rows, cols], std, rng))
}

pub(crate) fn ones<S: Scalar>(d: usize) -> Arc<Tensor<S>> {
    Arc::new(Tensor::full(&[d], S::one()))
}

/// Bind a parameter either as trainable or as a constant.
pub(crate) fn bind<S: Scalar>(g: &mut Graph<S>, t: &Arc<Tensor<S>>, trainable: bool) -> Var {
    if trainable {
        g.param_shared(t)
    } else {
        g.constant_shared(t)
    }
}

/// Softmax of one logit row, computed in `f64`.
pub fn probs_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
    crate::tensor::kernels::softmax_in_place(&mut p);
    p
}

/// Row-wise softmax of a logit matrix, normalised in `f64` before storage.
pub fn probs_tensor<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let cols = logits.cols();
    let mut data = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        data.extend(probs_f64(logits.row(r)).into_iter().map(S::of));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
        .reshape(vec![logits.rows(), cols])
        .expect("matrix")
}

/// Copy values from `src` into `dst` by name; missing names are an error.
pub(crate) fn load_named<S: Scalar>(dst: &mut [(&str, &mut Arc<Tensor<S>>)], src: &NamedParams<S>) -> Result<()> {
    for (name, slot) in dst.iter_mut() {
        let found = src
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if found.1.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: stored shape {:?}, expected {:?}",
                found.1.shape(),
                slot.shape()
            )));
        }
        **slot = Arc::clone(&found.1);
    }
    Ok(())
}
