//! Decoding equivalence measurements.

use beagle::masks::strict_causal_mask;
use beagle::models::{probs_f64, DraftHead, KvCache, ModelConfig, TargetModel};
use beagle::specdec::{sd_generate, Mode, SdConfig};
use beagle::Tensor32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max abs difference in states and logits between iterated draft steps
/// with cache appends and one masked batch forward, for one random sequence.
pub fn kv_max_diff(cfg: ModelConfig, max_len: usize, seed: u64) -> f32 {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let target = TargetModel::<f32>::init(cfg, rng).unwrap();
    let head = DraftHead::init(cfg, rng).unwrap();
    let t = rng.gen_range(1..=max_len);
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let states = Tensor32::randn(&[t, cfg.d], 1.0, rng);
    let (batch, logits) = head.forward(&target.embed, &tokens, &states, &strict_causal_mask(t)).unwrap();
    let mut cache = KvCache::new(cfg.d, t);
    let mut worst = 0.0f32;
    for m in 1..=t {
        let s = head.step(&target.embed, &cache, tokens[m - 1], m).unwrap();
        for (a, b) in s.state.iter().zip(batch.row(m - 1)).chain(s.logits.iter().zip(logits.row(m - 1))) {
            worst = worst.max((a - b).abs());
        }
        cache.append(&head, states.row(m - 1), true).unwrap();
    }
    worst
}

/// Total-variation distance between first-token frequencies from
/// speculative sampling and the target's distribution, on a micro target
/// with eight tokens.
pub fn first_token_tv(draws: usize, gamma: usize) -> f64 {
    let cfg = ModelConfig { d: 32, heads: 2, target_layers: 2, t_max: 16, vocab: 8 };
    let rng = &mut ChaCha8Rng::seed_from_u64(3);
    let target = TargetModel::<f32>::init_scaled(cfg, 2.0, rng).unwrap();
    let head = DraftHead::init(cfg, rng).unwrap();
    let prompt = [1usize, 4, 2];
    let out = target.forward(&prompt).unwrap();
    let p = probs_f64(out.logits.row(prompt.len() - 1));
    let sd = SdConfig { gamma, mode: Mode::Sampling, concat_draft_states: true, stop_at_eos: false };
    let mut counts = [0usize; 8];
    for i in 0..draws {
        let (toks, _) = sd_generate(&target, &head, &prompt, 1, sd, i as u64).unwrap();
        counts[toks[0]] += 1;
    }
    0.5 * p.iter().zip(counts).map(|(pi, c)| (pi - c as f64 / draws as f64).abs()).sum::<f64>()
}
