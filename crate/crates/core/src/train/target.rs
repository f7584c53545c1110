//! Next-token pretraining of the target model.

use std::io::Write;
use std::sync::Arc;

use super::optim::{clip_grad_norm, default_warmup, warmup_lr, AdamW, AdamWConfig};
use crate::data::{CorpusLoader, SequenceBatch};
use crate::error::{Error, Result};
use crate::models::TargetModel;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` selects [`default_warmup`].
    pub warmup: Option<usize>,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 16, lr: 3e-3, warmup: None, grad_clip: 1.0, weight_decay: 0.0, patience: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
}

/// Summed next-token CE over every predicted position, and that count.
pub fn target_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &TargetModel<S>,
    vars: &crate::models::TargetVars,
    batch: &SequenceBatch,
) -> Result<(Option<Var>, usize)> {
    let v = model.config.vocab;
    let mut parts = Vec::new();
    let mut count = 0;
    for r in 0..batch.len() {
        let toks = batch.row(r);
        if toks.len() < 2 {
            continue;
        }
        let inputs = &toks[..toks.len() - 1];
        let (_, logits) = model.forward_graph(g, vars, inputs, None)?;
        let mut onehot = Tensor::zeros(&[inputs.len(), v]);
        for (i, &t) in toks[1..].iter().enumerate() {
            onehot.row_mut(i)[t] = S::one();
        }
        let w = vec![S::one(); inputs.len()];
        parts.push(g.soft_cross_entropy(&onehot, logits, &w)?);
        count += inputs.len();
    }
    let mut acc = match parts.first() {
        Some(&p) => p,
        None => return Ok((None, 0)),
    };
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok((Some(acc), count))
}

/// Mean next-token CE over a corpus.
pub fn evaluate_target<S: Scalar>(model: &TargetModel<S>, data: &CorpusLoader, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for idx in (0..data.chunks.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let batch = data.batch_of(idx);
        let mut g = Graph::inference();
        let vars = model.bind(&mut g, false);
        let (loss, n) = target_batch_loss(&mut g, model, &vars, &batch)?;
        if let Some(l) = loss {
            total += g.value(l).item().f64();
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::validation("evaluation corpus has no predicted positions"));
    }
    Ok(total / count as f64)
}

/// Train until the epoch cap or until validation CE stops improving.
///
/// Writes `epoch,step,ce,grad_norm` rows to `log`.
pub fn train_target<S: Scalar>(
    model: &mut TargetModel<S>,
    train: &CorpusLoader,
    val: &CorpusLoader,
    cfg: &TargetTrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<TargetEpoch>> {
    let params: Vec<Arc<Tensor<S>>> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &params);
    let steps_per_epoch = train.chunks.len().div_ceil(cfg.batch_size.max(1));
    let warmup = cfg.warmup.unwrap_or_else(|| default_warmup(steps_per_epoch * cfg.epochs));
    writeln!(log, "epoch,step,ce,grad_norm")?;
    let mut history: Vec<TargetEpoch> = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for idx in train.batch_indices(epoch, cfg.batch_size) {
            let batch = train.batch_of(&idx);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let (loss, n) = target_batch_loss(&mut g, model, &vars, &batch)?;
            let Some(loss) = loss else { continue };
            let mean = g.scale(loss, S::one() / S::usize(n));
            g.check_finite(mean, "target loss")?;
            g.backward(mean)?;
            let all = vars.all();
            let mut grads: Vec<Vec<S>> = all
                .iter()
                .zip(&params)
                .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![S::zero(); p.numel()]))
                .collect();
            let ce = g.value(mean).item().f64();
            drop(g);
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
            step += 1;
            let mut current: Vec<Arc<Tensor<S>>> = model.named_params().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut current, &grads, warmup_lr(cfg.lr, step, warmup))?;
            model.set_params(current)?;
            writeln!(log, "{epoch},{step},{ce:.6},{norm:.6}")?;
            sum += ce * n as f64;
            count += n;
        }
        let val_ce = evaluate_target(model, val, cfg.batch_size)?;
        history.push(TargetEpoch { epoch, train_ce: sum / count.max(1) as f64, val_ce });
        if val_ce < best - 1e-4 {
            best = val_ce;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::toy;
    use crate::models::ModelConfig;

    #[test]
    fn learns_toy_text() {
        let bytes = toy::generate(6000, 1);
        let loader = CorpusLoader::from_bytes(&bytes, 24, 0).unwrap();
        let (train, val) = loader.split_holdout(0.1);
        let cfg = ModelConfig { d: 16, heads: 2, target_layers: 1, t_max: 32, vocab: 258 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TargetModel::<f32>::init(cfg, &mut rng).unwrap();
        let before = evaluate_target(&model, &val, 8).unwrap();
        let tc = TargetTrainConfig { epochs: 2, batch_size: 8, lr: 1e-2, warmup: Some(5), ..Default::default() };
        let mut log = Vec::new();
        let hist = train_target(&mut model, &train, &val, &tc, &mut log).unwrap();
        assert!(hist.last().unwrap().val_ce < before);
        assert!(hist.last().unwrap().val_ce < (258f64).ln());
        assert!(String::from_utf8(log).unwrap().starts_with("epoch,step,ce,grad_norm\n1,1,"));
    }
}
