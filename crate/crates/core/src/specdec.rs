//! Chain speculative decoding with the draft head.
//!
//! Between iterations a session holds tokens `t_1..t_n`. The target has
//! processed `t_1..t_{n−1}` and the draft cache holds exactly their true
//! states; `t_n` is the newest token and has not been through the target.

use std::io::Write;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::AcceptanceProfile;
use crate::data::EOS;
use crate::error::{Error, Result};
use crate::models::{probs_f64, DraftHead, KvCache, TargetCache, TargetModel};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Greedy,
    Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdConfig {
    /// Draft length γ.
    pub gamma: usize,
    pub mode: Mode,
    /// Append each drafted state to the draft cache before the next step.
    pub concat_draft_states: bool,
    pub stop_at_eos: bool,
}

impl Default for SdConfig {
    fn default() -> Self {
        Self { gamma: 5, mode: Mode::Greedy, concat_draft_states: true, stop_at_eos: true }
    }
}

/// Drafted tokens and the distributions they were drawn from.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub tokens: Vec<usize>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Verdict<S> {
    /// Number of drafted tokens accepted.
    pub accepted: usize,
    /// Correction token on rejection, bonus token on full acceptance.
    pub next: usize,
    /// Target states for the newest token and each accepted draft token.
    pub states: Tensor<S>,
    /// Per drafted position: accepted, rejected, or never reached.
    pub mask: Vec<Option<bool>>,
}

impl<S> Verdict<S> {
    pub fn tau(&self) -> usize {
        self.accepted + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub tau: usize,
    pub draft_us: f64,
    pub verify_us: f64,
    pub mask: Vec<Option<bool>>,
}

impl IterRecord {
    /// `1` accepted, `0` rejected, `-` not reached.
    pub fn mask_string(&self) -> String {
        self.mask
            .iter()
            .map(|m| match m {
                Some(true) => '1',
                Some(false) => '0',
                None => '-',
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdMetrics {
    pub iterations: Vec<IterRecord>,
    /// `Σ τ`, before truncation to the token budget.
    pub emitted: usize,
    pub wall_us: f64,
}

impl SdMetrics {
    pub fn merge(&mut self, other: &SdMetrics) {
        self.iterations.extend(other.iterations.iter().cloned());
        self.emitted += other.emitted;
        self.wall_us += other.wall_us;
    }

    pub fn mean_tau(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().map(|r| r.tau as f64).sum::<f64>() / self.iterations.len() as f64
    }

    pub fn mean_draft_us(&self) -> f64 {
        mean(self.iterations.iter().map(|r| r.draft_us))
    }

    pub fn mean_verify_us(&self) -> f64 {
        mean(self.iterations.iter().map(|r| r.verify_us))
    }

    pub fn tokens_per_sec(&self) -> f64 {
        if self.wall_us <= 0.0 {
            return 0.0;
        }
        self.emitted as f64 / (self.wall_us * 1e-6)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub struct SdSession<'a, S> {
    target: &'a TargetModel<S>,
    head: &'a DraftHead<S>,
    pub config: SdConfig,
    target_cache: TargetCache<S>,
    draft_cache: KvCache<S>,
    pub tokens: Vec<usize>,
    prompt_len: usize,
    rng: ChaCha8Rng,
}

impl<'a, S: Scalar> SdSession<'a, S> {
    /// Encode-time prefill: run the target over all but the last prompt
    /// token and cache the resulting true states.
    pub fn new(
        target: &'a TargetModel<S>,
        head: &'a DraftHead<S>,
        prompt: &[usize],
        config: SdConfig,
        seed: u64,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::validation("prompt must hold at least one token"));
        }
        if config.gamma == 0 {
            return Err(Error::validation("draft length must be at least 1"));
        }
        let cfg = target.config;
        let mut s = Self {
            target,
            head,
            config,
            target_cache: TargetCache::new(&cfg),
            draft_cache: KvCache::new(cfg.d, cfg.t_max + config.gamma),
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if prompt.len() > 1 {
            let out = target.forward_incremental(&mut s.target_cache, &prompt[..prompt.len() - 1])?;
            s.draft_cache.reset_to_true(head, &out.states)?;
        }
        Ok(s)
    }

    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn draft_cache(&self) -> &KvCache<S> {
        &self.draft_cache
    }

    pub fn target_len(&self) -> usize {
        self.target_cache.len()
    }

    /// Largest draft length that still fits in the target context.
    pub fn room(&self) -> usize {
        (self.target.config.t_max + 1).saturating_sub(self.tokens.len() + 1).min(self.config.gamma)
    }

    pub fn draft_chain(&mut self, gamma: usize) -> Result<Proposal> {
        let n = self.tokens.len();
        let mut tok = self.tokens[n - 1];
        let mut tokens = Vec::with_capacity(gamma);
        let mut qs = Vec::with_capacity(gamma);
        for step in 0..gamma {
            let pos = n + step;
            let out = if self.config.concat_draft_states {
                self.head.step(&self.target.embed, &self.draft_cache, tok, pos)?
            } else {
                self.head.step_at(&self.target.embed, &self.draft_cache, tok, pos)?
            };
            let q = probs_f64(&out.logits);
            tok = match self.config.mode {
                Mode::Greedy => argmax(&q),
                Mode::Sampling => sample(&q, &mut self.rng)?,
            };
            if self.config.concat_draft_states && step + 1 < gamma {
                self.draft_cache.append(self.head, &out.state, false)?;
            }
            tokens.push(tok);
            qs.push(q);
        }
        Ok(Proposal { tokens, q: qs })
    }

    /// Score the proposal with one target pass and decide acceptance. The
    /// target cache is truncated to the verified prefix.
    pub fn verify(&mut self, proposal: &Proposal) -> Result<Verdict<S>> {
        let gamma = proposal.tokens.len();
        if gamma == 0 {
            return Err(Error::validation("empty proposal"));
        }
        let n = self.tokens.len();
        let mut input = Vec::with_capacity(gamma + 1);
        input.push(self.tokens[n - 1]);
        input.extend_from_slice(&proposal.tokens);
        let base = self.target_cache.len();
        let out = self.target.forward_incremental(&mut self.target_cache, &input)?;
        let mut mask = vec![None; gamma];
        let mut accepted = gamma;
        let mut next = None;
        for j in 0..gamma {
            let p = probs_f64(out.logits.row(j));
            let t = proposal.tokens[j];
            let ok = match self.config.mode {
                Mode::Greedy => argmax(&p) == t,
                Mode::Sampling => {
                    let q = proposal.q[j][t];
                    if q <= 0.0 {
                        return Err(Error::Consistency(format!("draft proposed token {t} with zero probability")));
                    }
                    self.rng.gen::<f64>() < (p[t] / q).min(1.0)
                }
            };
            mask[j] = Some(ok);
            if !ok {
                accepted = j;
                next = Some(match self.config.mode {
                    Mode::Greedy => argmax(&p),
                    Mode::Sampling => sample(&residual(&p, &proposal.q[j]), &mut self.rng)?,
                });
                break;
            }
        }
        let next = match next {
            Some(t) => t,
            None => {
                let p = probs_f64(out.logits.row(gamma));
                match self.config.mode {
                    Mode::Greedy => argmax(&p),
                    Mode::Sampling => sample(&p, &mut self.rng)?,
                }
            }
        };
        self.target_cache.truncate(base + accepted + 1);
        let d = out.states.cols();
        let states = Tensor::matrix(accepted + 1, d, out.states.data()[..(accepted + 1) * d].to_vec())?;
        Ok(Verdict { accepted, next, states, mask })
    }

    /// Reset the draft cache to true states and extend the token list.
    pub fn commit(&mut self, proposal: &Proposal, verdict: &Verdict<S>) -> Result<()> {
        self.draft_cache.reset_to_true(self.head, &verdict.states)?;
        self.tokens.extend_from_slice(&proposal.tokens[..verdict.accepted]);
        self.tokens.push(verdict.next);
        Ok(())
    }

    /// One draft-verify-commit iteration.
    pub fn iterate(&mut self) -> Result<Option<IterRecord>> {
        let gamma = self.room();
        if gamma == 0 {
            return Ok(None);
        }
        let t0 = Instant::now();
        let proposal = self.draft_chain(gamma)?;
        let t1 = Instant::now();
        let verdict = self.verify(&proposal)?;
        let t2 = Instant::now();
        self.commit(&proposal, &verdict)?;
        let t3 = Instant::now();
        let mut mask = verdict.mask.clone();
        mask.resize(self.config.gamma, None);
        Ok(Some(IterRecord {
            tau: verdict.tau(),
            draft_us: (t1 - t0).as_secs_f64() * 1e6 + (t3 - t2).as_secs_f64() * 1e6,
            verify_us: (t2 - t1).as_secs_f64() * 1e6,
            mask,
        }))
    }
}

/// Normalised `max(0, p − q)`, or `p` when that has no mass.
pub fn residual(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z > 0.0 {
        r.into_iter().map(|v| v / z).collect()
    } else {
        p.to_vec()
    }
}

pub fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Consistency(format!("cannot sample: {e}")))?;
    Ok(dist.sample(rng))
}

/// Generate up to `max_tokens` tokens after `prompt`.
///
/// Stops after the iteration that emits EOS (when enabled), dropping
/// anything after it; the output is cut to `max_tokens`.
pub fn sd_generate<S: Scalar>(
    target: &TargetModel<S>,
    head: &DraftHead<S>,
    prompt: &[usize],
    max_tokens: usize,
    config: SdConfig,
    seed: u64,
) -> Result<(Vec<usize>, SdMetrics)> {
    let start = Instant::now();
    let mut session = SdSession::new(target, head, prompt, config, seed)?;
    let mut metrics = SdMetrics::default();
    while session.generated().len() < max_tokens {
        let Some(rec) = session.iterate()? else { break };
        metrics.emitted += rec.tau;
        metrics.iterations.push(rec);
        if config.stop_at_eos && session.generated().contains(&EOS) {
            break;
        }
    }
    let mut out = session.generated().to_vec();
    if config.stop_at_eos {
        if let Some(at) = out.iter().position(|&t| t == EOS) {
            out.truncate(at + 1);
        }
    }
    out.truncate(max_tokens);
    metrics.wall_us = start.elapsed().as_secs_f64() * 1e6;
    Ok((out, metrics))
}

/// Target-only decoding, one token per forward pass.
pub fn target_generate<S: Scalar>(
    target: &TargetModel<S>,
    prompt: &[usize],
    max_tokens: usize,
    mode: Mode,
    stop_at_eos: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::validation("prompt must hold at least one token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = TargetCache::new(&target.config);
    let mut out = Vec::with_capacity(max_tokens);
    let mut feed = prompt.to_vec();
    while out.len() < max_tokens && cache.len() + feed.len() <= target.config.t_max {
        let o = target.forward_incremental(&mut cache, &feed)?;
        let p = probs_f64(o.logits.row(o.logits.rows() - 1));
        let t = match mode {
            Mode::Greedy => argmax(&p),
            Mode::Sampling => sample(&p, &mut rng)?,
        };
        out.push(t);
        if stop_at_eos && t == EOS {
            break;
        }
        feed = vec![t];
    }
    Ok(out)
}

/// Conditional acceptance rate per drafted position.
pub fn measure_alpha_profile(metrics: &SdMetrics) -> Result<AcceptanceProfile> {
    if metrics.iterations.is_empty() {
        return Err(Error::validation("no iterations logged"));
    }
    let masks: Vec<Vec<Option<bool>>> = metrics.iterations.iter().map(|r| r.mask.clone()).collect();
    alpha_from_masks(&masks)
}

pub fn alpha_from_masks(masks: &[Vec<Option<bool>>]) -> Result<AcceptanceProfile> {
    let k = masks.iter().map(Vec::len).max().unwrap_or(0);
    if k == 0 {
        return Err(Error::validation("no drafted positions logged"));
    }
    let mut reached = vec![0usize; k];
    let mut accepted = vec![0usize; k];
    for m in masks {
        for (i, e) in m.iter().enumerate() {
            match e {
                Some(true) => {
                    reached[i] += 1;
                    accepted[i] += 1;
                }
                Some(false) => reached[i] += 1,
                None => {}
            }
        }
    }
    let alpha = reached.iter().zip(&accepted).map(|(&r, &a)| if r == 0 { 0.0 } else { a as f64 / r as f64 }).collect();
    AcceptanceProfile::new(alpha)
}

/// `E[τ] / (T_d / T_v + 1)`.
pub fn improvement_factor(metrics: &SdMetrics) -> Result<f64> {
    improvement_from(metrics.mean_tau(), metrics.mean_draft_us(), metrics.mean_verify_us())
}

pub fn improvement_from(mean_tau: f64, t_draft: f64, t_verify: f64) -> Result<f64> {
    if t_verify <= 0.0 {
        return Err(Error::Domain("verification time must be positive".into()));
    }
    Ok(mean_tau / (t_draft / t_verify + 1.0))
}

/// `iter,tau,T_d_us,T_v_us,accepted_mask` rows followed by a `#` summary.
pub fn write_eval_csv(out: &mut dyn Write, metrics: &SdMetrics) -> Result<()> {
    writeln!(out, "iter,tau,T_d_us,T_v_us,accepted_mask")?;
    for (i, r) in metrics.iterations.iter().enumerate() {
        writeln!(out, "{},{},{:.1},{:.1},{}", i + 1, r.tau, r.draft_us, r.verify_us, r.mask_string())?;
    }
    if let Ok(profile) = measure_alpha_profile(metrics) {
        let a: Vec<String> = profile.alpha().iter().map(|a| format!("{a:.4}")).collect();
        writeln!(out, "# alpha={}", a.join(";"))?;
    }
    writeln!(out, "# mean_tau={:.4}", metrics.mean_tau())?;
    if let Ok(f) = improvement_factor(metrics) {
        writeln!(out, "# improvement_factor={f:.4}")?;
    }
    writeln!(out, "# tokens_per_sec={:.2}", metrics.tokens_per_sec())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::models::ModelConfig;

    fn models(seed: u64) -> (TargetModel<f32>, DraftHead<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { d: 16, heads: 2, target_layers: 2, t_max: 64, vocab: 12 };
        (TargetModel::init_scaled(cfg, 3.0, &mut rng).unwrap(), DraftHead::init(cfg, &mut rng).unwrap())
    }

    #[test]
    fn residual_example() {
        let r = residual(&[0.6, 0.4], &[0.9, 0.1]);
        assert!((r[0] - 0.0).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert_eq!(residual(&[0.5, 0.5], &[0.5, 0.5]), vec![0.5, 0.5]);
    }

    #[test]
    fn alpha_counting() {
        let masks = vec![
            vec![Some(true), Some(true), Some(false)],
            vec![Some(true), Some(false), None],
            vec![Some(true), Some(true), Some(true)],
        ];
        let a = alpha_from_masks(&masks).unwrap();
        assert_eq!(a.alpha(), &[1.0, 2.0 / 3.0, 0.5]);
        assert!(alpha_from_masks(&[]).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_from(3.0, 1.0, 4.0).unwrap() - 2.4).abs() < 1e-12);
        assert_eq!(improvement_from(2.5, 0.0, 7.0).unwrap(), 2.5);
        assert!(improvement_from(1.0, 0.3, 1.0).unwrap() <= 1.0);
        assert!(matches!(improvement_from(1.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn greedy_is_lossless_with_random_head() {
        let (target, head) = models(1);
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompt: Vec<usize> = (0..1 + seed as usize).map(|_| rng.gen_range(0..12)).collect();
            let base = target_generate(&target, &prompt, 30, Mode::Greedy, false, 0).unwrap();
            let cfg = SdConfig { gamma: 3, stop_at_eos: false, ..SdConfig::default() };
            let (out, m) = sd_generate(&target, &head, &prompt, 30, cfg, 0).unwrap();
            assert_eq!(out, base);
            assert!(m.iterations.iter().all(|r| r.tau >= 1 && r.tau <= 4));
            assert_eq!(m.emitted, m.iterations.iter().map(|r| r.tau).sum::<usize>());
        }
    }

    #[test]
    fn cache_holds_only_true_states_after_each_iteration() {
        let (target, head) = models(2);
        let mut s = SdSession::new(&target, &head, &[1, 2, 3], SdConfig::default(), 0).unwrap();
        for _ in 0..4 {
            s.iterate().unwrap();
            let c = s.draft_cache();
            assert_eq!(c.filled(), c.true_len());
            assert_eq!(c.filled(), s.tokens.len() - 1);
            assert_eq!(s.target_len(), s.tokens.len() - 1);
        }
        let full = target.forward(&s.tokens[..s.tokens.len() - 1]).unwrap();
        let mut fresh = KvCache::new(16, 64);
        fresh.reset_to_true(&head, &full.states).unwrap();
        let diff = fresh.keys().iter().zip(s.draft_cache().keys()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6);
    }

    #[test]
    fn self_draft_accepts_everything() {
        // A proposal copied from the target's own greedy continuation.
        let (target, head) = models(3);
        let prompt = [4, 5];
        let cont = target_generate(&target, &prompt, 4, Mode::Greedy, false, 0).unwrap();
        let mut s = SdSession::new(&target, &head, &prompt, SdConfig { gamma: 3, ..SdConfig::default() }, 0).unwrap();
        let p = Proposal { tokens: cont[..3].to_vec(), q: vec![vec![1.0 / 12.0; 12]; 3] };
        let v = s.verify(&p).unwrap();
        assert_eq!(v.tau(), 4);
        assert_eq!(v.next, cont[3]);
    }

    #[test]
    fn zero_mass_proposal_is_inconsistent() {
        let (target, head) = models(4);
        let cfg = SdConfig { mode: Mode::Sampling, gamma: 1, ..SdConfig::default() };
        let mut s = SdSession::new(&target, &head, &[1], cfg, 0).unwrap();
        let mut q = vec![0.5; 12];
        q[3] = 0.0;
        let p = Proposal { tokens: vec![3], q: vec![q] };
        assert!(matches!(s.verify(&p), Err(Error::Consistency(_))));
    }

    #[test]
    fn no_concat_drafts_with_stale_states() {
        let (target, head) = models(5);
        let cfg = SdConfig { gamma: 2, concat_draft_states: false, ..SdConfig::default() };
        let mut s = SdSession::new(&target, &head, &[1, 2, 3], cfg, 0).unwrap();
        s.draft_chain(2).unwrap();
        assert_eq!(s.draft_cache().filled(), 2);
        let base = target_generate(&target, &[1, 2, 3], 20, Mode::Greedy, false, 0).unwrap();
        let (out, _) = sd_generate(&target, &head, &[1, 2, 3], 20, SdConfig { stop_at_eos: false, ..cfg }, 0).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn eval_csv_layout() {
        let m = SdMetrics {
            iterations: vec![IterRecord { tau: 2, draft_us: 10.0, verify_us: 40.0, mask: vec![Some(true), Some(false)] }],
            emitted: 2,
            wall_us: 50.0,
        };
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &m).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iter,tau,T_d_us,T_v_us,accepted_mask\n1,2,10.0,40.0,10\n# alpha=1.0000;0.0000\n"));
    }
}
