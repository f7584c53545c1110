use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay. Moments are stored at the parameter
/// precision so that a saved state resumes bit-identically.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &[Arc<Tensor<S>>]) -> Self {
        let zeros = || params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [Arc<Tensor<S>>], grads: &[Vec<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the parameter list"));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let data = Arc::make_mut(p).data_mut();
            if g.len() != data.len() {
                return Err(Error::shape("gradient length differs from parameter"));
            }
            for i in 0..data.len() {
                let gi = g[i].f64();
                let mi = c.beta1 * m[i].f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = S::of(mi);
                v[i] = S::of(vi);
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                data[i] = S::of(data[i].f64() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of `grads`; scales them down to `max_norm` if larger.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> Result<f64> {
    let sq: f64 = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        let bad = grads.iter().position(|g| g.iter().any(|v| !v.is_finite()));
        return Err(Error::NonFinite(format!("gradient of parameter #{} is not finite", bad.unwrap_or(0))));
    }
    if max_norm > 0.0 && norm > max_norm {
        let s = S::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    Ok(norm)
}

/// Linear warmup to `lr` over `warmup` steps, constant afterwards.
/// `step` counts from 1.
pub fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

/// `min(2000, 10% of total)` steps.
pub fn default_warmup(total_steps: usize) -> usize {
    2000.min(total_steps / 10)
}
