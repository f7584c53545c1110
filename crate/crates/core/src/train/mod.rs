//! Draft-head training: block-attention losses, optimizer, and the two-stage
//! driver. Target pretraining lives in [`target`].

mod loss;
mod optim;
mod run;
pub mod target;

use rand::Rng;

pub use loss::{
    beta_star, early_stage_loss, general_loss, late_stage_loss, Lookahead, LossOutput, LossReport, LossRow, LossSpec,
    TeacherRow,
};
pub use optim::{clip_grad_norm, default_warmup, warmup_lr, AdamW, AdamWConfig};
pub use run::{
    run_training, stage_plan, EpochRecord, RunOptions, Stage, StageKind, Teachers, TrainState, ValidationSet,
    LOG_HEADER,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Window size.
    pub k: usize,
    /// Simulation steps of the late stage, `1 ≤ s ≤ k`.
    pub steps: usize,
    pub epochs_early: usize,
    pub epochs_late: usize,
    pub lr: f64,
    /// `None` selects [`default_warmup`].
    pub warmup: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub vloss_coef: f64,
    /// Standard deviation of the noise added to key states.
    pub noise_std: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub draft_token_queries: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            steps: 4,
            epochs_early: 10,
            epochs_late: 10,
            lr: 3e-5,
            warmup: None,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            grad_clip: 0.5,
            vloss_coef: 10.0,
            noise_std: 0.2,
            batch_size: 8,
            seed: 0,
            draft_token_queries: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.steps == 0 || self.steps > self.k {
            return Err(Error::validation(format!("need 1 ≤ s ≤ k, got s = {}, k = {}", self.steps, self.k)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        let coeffs = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("vloss_coef", self.vloss_coef),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{name} = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// `h + ε` with `ε` i.i.d. `N(0, σ²)`; the identity when `σ = 0`.
pub fn inject_state_noise<S: Scalar, R: Rng + ?Sized>(h: &Tensor<S>, sigma: f64, rng: &mut R) -> Result<Tensor<S>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("noise σ = {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(h.clone());
    }
    let noise = Tensor::<S>::randn(h.shape(), sigma, rng);
    let mut out = h.clone();
    for (o, e) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += *e;
    }
    Ok(out)
}
