mod support;

use beagle::models::{probs_f64, DraftHead, KvCache, ModelConfig, TargetCache, TargetModel};
use beagle::specdec::{sd_generate, target_generate, Mode, SdConfig, SdSession};
use support::decoding::{first_token_tv, kv_max_diff};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(seed: u64, vocab: usize, d: usize) -> (TargetModel<f32>, DraftHead<f32>) {
    let cfg = ModelConfig { d, heads: 2, target_layers: 2, t_max: 48, vocab };
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    (TargetModel::init_scaled(cfg, 3.0, rng).unwrap(), DraftHead::init(cfg, rng).unwrap())
}

#[test]
fn draft_steps_match_batch_forward() {
    let cfg = ModelConfig { d: 32, heads: 4, target_layers: 1, t_max: 64, vocab: 40 };
    for seed in 0..100u64 {
        let diff = kv_max_diff(cfg, 24, seed);
        assert!(diff <= 1e-6, "seed {seed}: {diff}");
    }
}

#[test]
fn incremental_target_matches_full_forward() {
    for seed in 0..20u64 {
        let (target, _) = small(seed, 30, 16);
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..30).map(|_| rng.gen_range(0..30)).collect();
        let full = target.forward(&tokens).unwrap();
        let mut cache = TargetCache::new(&target.config);
        let mut at = 0;
        while at < tokens.len() {
            let n = rng.gen_range(1..=5).min(tokens.len() - at);
            let part = target.forward_incremental(&mut cache, &tokens[at..at + n]).unwrap();
            for r in 0..n {
                assert_eq!(part.states.row(r), full.states.row(at + r));
                assert_eq!(part.logits.row(r), full.logits.row(at + r));
            }
            at += n;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn greedy_speculation_is_lossless(seed in 0u64..1000, gamma in 1usize..7, concat in any::<bool>(), plen in 1usize..6) {
        let (target, head) = small(seed, 20, 16);
        let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 1);
        let prompt: Vec<usize> = (0..plen).map(|_| rng.gen_range(0..20)).collect();
        let cfg = SdConfig { gamma, mode: Mode::Greedy, concat_draft_states: concat, stop_at_eos: false };
        let (sd, _) = sd_generate(&target, &head, &prompt, 30, cfg, 0).unwrap();
        let base = target_generate(&target, &prompt, 30, Mode::Greedy, false, 0).unwrap();
        prop_assert_eq!(sd, base);
    }
}

#[test]
fn caches_hold_only_true_states_between_iterations() {
    let (target, head) = small(5, 20, 16);
    let prompt = [1usize, 2, 3];
    let cfg = SdConfig { gamma: 4, mode: Mode::Sampling, concat_draft_states: true, stop_at_eos: false };
    let mut s = SdSession::new(&target, &head, &prompt, cfg, 9).unwrap();
    while s.iterate().unwrap().is_some() {
        let n = s.tokens.len();
        assert_eq!(s.target_len(), n - 1);
        assert_eq!(s.draft_cache().filled(), n - 1);
        assert_eq!(s.draft_cache().true_len(), n - 1);
        let truth = target.forward(&s.tokens[..n - 1]).unwrap().states;
        let mut fresh = KvCache::new(16, target.config.t_max + 4);
        fresh.reset_to_true(&head, &truth).unwrap();
        let diff = fresh.keys().iter().zip(s.draft_cache().keys()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "draft cache drifted from true states by {diff}");
    }
    assert_eq!(s.tokens.len(), target.config.t_max);
}

#[test]
fn speculative_sampling_matches_target_distribution() {
    let tv = first_token_tv(20_000, 3);
    assert!(tv <= 0.02, "total variation {tv}");
}

#[test]
fn speculative_sampling_joint_of_two_tokens() {
    let cfg = ModelConfig { d: 16, heads: 2, target_layers: 1, t_max: 16, vocab: 4 };
    let rng = &mut ChaCha8Rng::seed_from_u64(8);
    let target = TargetModel::<f32>::init_scaled(cfg, 2.0, rng).unwrap();
    let head = DraftHead::init(cfg, rng).unwrap();
    let prompt = [2usize];
    let p1 = probs_f64(target.forward(&prompt).unwrap().logits.row(0));
    let mut exact = [0.0f64; 16];
    for a in 0..4 {
        let p2 = probs_f64(target.forward(&[2, a]).unwrap().logits.row(1));
        for b in 0..4 {
            exact[a * 4 + b] = p1[a] * p2[b];
        }
    }
    let sd = SdConfig { gamma: 2, mode: Mode::Sampling, concat_draft_states: true, stop_at_eos: false };
    let draws = 20_000;
    let mut counts = [0usize; 16];
    for i in 0..draws {
        let (t, _) = sd_generate(&target, &head, &prompt, 2, sd, 1_000_000 + i as u64).unwrap();
        counts[t[0] * 4 + t[1]] += 1;
    }
    let tv: f64 = 0.5 * exact.iter().zip(counts).map(|(e, c)| (e - c as f64 / draws as f64).abs()).sum::<f64>();
    assert!(tv <= 0.02, "total variation {tv}");
}

#[test]
fn eos_ends_generation() {
    let cfg = ModelConfig { d: 16, heads: 2, target_layers: 1, t_max: 64, vocab: 258 };
    let rng = &mut ChaCha8Rng::seed_from_u64(1);
    let mut target = TargetModel::<f32>::init(cfg, rng).unwrap();
    // bias the output towards EOS by aligning its embedding with every state
    let mut params = target.named_params();
    let embed = std::sync::Arc::make_mut(&mut params[0].1);
    for c in 0..16 {
        embed.row_mut(beagle::data::EOS)[c] = 50.0 * target.final_norm.data()[c].signum();
    }
    target.set_params(params.into_iter().map(|(_, t)| t).collect()).unwrap();
    let head = DraftHead::init(cfg, rng).unwrap();
    let sd = SdConfig { gamma: 3, mode: Mode::Greedy, concat_draft_states: true, stop_at_eos: true };
    let (out, _) = sd_generate(&target, &head, &[1, 2], 20, sd, 0).unwrap();
    let base = target_generate(&target, &[1, 2], 20, Mode::Greedy, true, 0).unwrap();
    assert_eq!(out, base);
    let at = out.iter().position(|&t| t == beagle::data::EOS).expect("EOS generated");
    assert_eq!(at + 1, out.len());
    assert!(out.len() < 20);
}
