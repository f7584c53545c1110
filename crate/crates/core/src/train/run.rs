//! The two-stage training driver.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{general_loss, LossRow, LossSpec, TeacherRow};
use super::optim::{clip_grad_norm, default_warmup, warmup_lr, AdamW};
use super::{inject_state_noise, TrainConfig};
use crate::data::{CorpusLoader, StateCache};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, DraftHead, TargetModel};
use crate::specdec::{measure_alpha_profile, sd_generate, Mode, SdConfig, SdMetrics};
use crate::tensor::{Graph, Tensor};

pub const LOG_HEADER: &str = "epoch,step,stage,ce,vloss,total,grad_norm";

/// Which stages a run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Early,
    Late,
    Both,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Stage::Early),
            "late" => Ok(Stage::Late),
            "both" => Ok(Stage::Both),
            other => Err(Error::usage(format!("unknown stage `{other}` (expected early, late or both)"))),
        }
    }
}

/// The loss used in one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Early,
    Late,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Early => "early",
            StageKind::Late => "late",
        }
    }
}

/// Loss kind of every epoch of a run, epoch `e` at index `e − 1`.
pub fn stage_plan(cfg: &TrainConfig, stage: Stage) -> Vec<StageKind> {
    let early = std::iter::repeat(StageKind::Early).take(cfg.epochs_early);
    let late = std::iter::repeat(StageKind::Late).take(cfg.epochs_late);
    match stage {
        Stage::Early => early.collect(),
        Stage::Late => late.collect(),
        Stage::Both => early.chain(late).collect(),
    }
}

/// Where target distributions and states come from.
#[derive(Clone, Copy)]
pub enum Teachers<'a> {
    /// Run the target on every batch.
    Target,
    /// Precomputed outputs, one entry per training chunk.
    Cache(&'a StateCache),
}

/// Prompts decoded greedily after every epoch to measure acceptance.
#[derive(Clone, Debug, Default)]
pub struct ValidationSet {
    pub prompts: Vec<Vec<usize>>,
    pub max_tokens: usize,
    pub gamma: usize,
}

impl ValidationSet {
    pub fn run(&self, target: &TargetModel<f32>, head: &DraftHead<f32>) -> Result<Option<SdMetrics>> {
        if self.prompts.is_empty() || self.max_tokens == 0 {
            return Ok(None);
        }
        let cfg = SdConfig { gamma: self.gamma, mode: Mode::Greedy, concat_draft_states: true, stop_at_eos: false };
        let mut all = SdMetrics::default();
        for p in &self.prompts {
            let (_, m) = sd_generate(target, head, p, self.max_tokens, cfg, 0)?;
            all.merge(&m);
        }
        Ok(Some(all))
    }
}

/// Parameters, optimizer moments and progress of a draft-training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub head: DraftHead<f32>,
    pub opt: AdamW<f32>,
    pub step: usize,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(head: DraftHead<f32>, cfg: &TrainConfig) -> Self {
        let params: Vec<Arc<Tensor<f32>>> = head.named_params().into_iter().map(|(_, t)| t).collect();
        let opt = AdamW::new(cfg.adamw(), &params);
        Self { head, opt, step: 0, epochs_done: 0 }
    }

    /// Draft checkpoint with optimizer state, progress and `config_text`.
    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_draft(&self.head);
        for (i, (name, _)) in self.head.named_params().into_iter().enumerate() {
            ck.push(format!("opt.m.{name}"), Tensor::vector(self.opt.m[i].clone()));
            ck.push(format!("opt.v.{name}"), Tensor::vector(self.opt.v[i].clone()));
        }
        ck.push_text("train.progress", &format!("step={} epochs_done={} t={}", self.step, self.epochs_done, self.opt.t));
        ck.push_text("meta.config", config_text);
        ck
    }

    /// Resume from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let head = ck.to_draft()?;
        let mut state = Self::fresh(head, cfg);
        let progress = ck
            .text("train.progress")
            .ok_or_else(|| Error::Format("checkpoint has no training progress; not resumable".into()))?;
        for part in progress.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Format(format!("bad progress entry `{part}`")))?;
            let v: u64 = v.parse().map_err(|_| Error::Format(format!("bad progress entry `{part}`")))?;
            match k {
                "step" => state.step = v as usize,
                "epochs_done" => state.epochs_done = v as usize,
                "t" => state.opt.t = v,
                _ => return Err(Error::Format(format!("unknown progress key `{k}`"))),
            }
        }
        for (i, (name, p)) in state.head.named_params().into_iter().enumerate() {
            for (which, dst) in [("m", &mut state.opt.m[i]), ("v", &mut state.opt.v[i])] {
                let t = ck
                    .get(&format!("opt.{which}.{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer moment opt.{which}.{name}")))?;
                if t.numel() != p.numel() {
                    return Err(Error::Format(format!("optimizer moment for {name} has the wrong size")));
                }
                *dst = t.data().to_vec();
            }
        }
        Ok(state)
    }
}

/// Losses and validation metrics of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: StageKind,
    pub ce: f64,
    pub vloss: f64,
    pub total: f64,
    pub val_tau: Option<f64>,
    pub val_alpha: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub stage: Stage,
    /// Stop after this epoch, as if interrupted.
    pub until_epoch: Option<usize>,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train `state` through the epochs of `opts.stage` that it has not done.
///
/// Writes one CSV row per optimizer step to `log` (plus the column header
/// when starting from epoch 1), a `# stage-switch` line before the first
/// late epoch that follows an early one, and a `# epoch` summary line after
/// every epoch. `on_epoch` runs after each epoch, e.g. to save a checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    cfg: &TrainConfig,
    opts: RunOptions,
    target: &TargetModel<f32>,
    train: &CorpusLoader,
    teachers: Teachers<'_>,
    validation: &ValidationSet,
    state: &mut TrainState,
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if state.head.config != target.config {
        return Err(Error::validation("draft and target configurations differ"));
    }
    if let Teachers::Cache(c) = teachers {
        c.check(target)?;
        if c.len() != train.chunks.len() {
            return Err(Error::StaleCache(format!(
                "state cache holds {} entries for {} chunks",
                c.len(),
                train.chunks.len()
            )));
        }
    }
    let plan = stage_plan(cfg, opts.stage);
    let last = opts.until_epoch.map_or(plan.len(), |e| e.min(plan.len()));
    let steps_per_epoch = train.chunks.len().div_ceil(cfg.batch_size);
    let warmup = cfg.warmup.unwrap_or_else(|| default_warmup(steps_per_epoch * plan.len()));
    if state.epochs_done == 0 {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let mut records = Vec::new();
    for epoch in state.epochs_done + 1..=last {
        let kind = plan[epoch - 1];
        if kind == StageKind::Late && epoch > 1 && plan[epoch - 2] == StageKind::Early {
            writeln!(log, "# stage-switch epoch={epoch} stage=late")?;
        }
        let mut spec = match kind {
            StageKind::Early => LossSpec::early(cfg.k)?,
            StageKind::Late => LossSpec::late(cfg.k, cfg.steps)?,
        };
        spec.draft_token_queries = cfg.draft_token_queries;
        let (mut ce_sum, mut vl_sum, mut tot_sum, mut n_sum) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in train.batch_indices(epoch, cfg.batch_size).into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, epoch, b));
            let offset = rng.gen_range(0..cfg.k);
            let mut teach = Vec::with_capacity(idx.len());
            let mut keys = Vec::with_capacity(idx.len());
            for &c in &idx {
                let tokens = &train.chunks[c].tokens;
                let row = match teachers {
                    Teachers::Target => TeacherRow::from_target(target, tokens)?,
                    Teachers::Cache(cache) => {
                        let e = &cache.entries[c];
                        TeacherRow::from_logits(e.states.clone(), &e.logits)
                    }
                };
                keys.push(inject_state_noise(&row.states, cfg.noise_std, &mut rng)?);
                teach.push(row);
            }
            let rows: Vec<LossRow<'_, f32>> = idx
                .iter()
                .zip(&teach)
                .zip(&keys)
                .map(|((&c, teacher), keys)| LossRow { tokens: &train.chunks[c].tokens, teacher, keys })
                .collect();

            let mut g = Graph::new();
            let vars = state.head.bind(&mut g, &target.embed, true);
            let out = match general_loss(&mut g, &state.head, &vars, &rows, offset, &spec, cfg.vloss_coef) {
                Err(Error::Validation(_)) if rows.iter().all(|r| r.tokens.len() < 2) => continue,
                r => r?,
            };
            g.check_finite(out.loss, "draft loss")
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {}: {e}", b + 1)))?;
            g.backward(out.loss)?;
            let params = state.head.named_params();
            let mut grads: Vec<Vec<f32>> = vars
                .params()
                .iter()
                .zip(&params)
                .map(|(&v, (_, p))| g.take_grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            drop(g);
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip)?;
            state.step += 1;
            let mut current: Vec<Arc<Tensor<f32>>> = params.into_iter().map(|(_, t)| t).collect();
            state.opt.step(&mut current, &grads, warmup_lr(cfg.lr, state.step, warmup))?;
            state.head.set_params(current)?;
            let r = &out.report;
            writeln!(
                log,
                "{epoch},{},{},{:.6},{:.6},{:.6},{norm:.6}",
                state.step,
                kind.name(),
                r.ce,
                r.vloss,
                r.total
            )?;
            ce_sum += r.ce * r.n as f64;
            vl_sum += r.vloss * r.n as f64;
            tot_sum += r.total * r.n as f64;
            n_sum += r.n;
        }
        let nn = n_sum.max(1) as f64;
        let mut rec = EpochRecord {
            epoch,
            stage: kind,
            ce: ce_sum / nn,
            vloss: vl_sum / nn,
            total: tot_sum / nn,
            val_tau: None,
            val_alpha: None,
        };
        let mut line = format!(
            "# epoch={epoch} stage={} ce={:.6} vloss={:.6} total={:.6}",
            kind.name(),
            rec.ce,
            rec.vloss,
            rec.total
        );
        if let Some(m) = validation.run(target, &state.head)? {
            let alpha = measure_alpha_profile(&m)?.alpha().to_vec();
            let a: Vec<String> = alpha.iter().map(|a| format!("{a:.6}")).collect();
            line.push_str(&format!(" val_tau={:.6} val_alpha={}", m.mean_tau(), a.join(";")));
            rec.val_tau = Some(m.mean_tau());
            rec.val_alpha = Some(alpha);
        }
        writeln!(log, "{line}")?;
        state.epochs_done = epoch;
        on_epoch(state, &rec)?;
        records.push(rec);
    }
    log.flush()?;
    Ok(records)
}
