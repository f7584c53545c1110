use std::sync::Arc;

use super::DraftHead;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Draft-side key/value cache.
///
/// Entry `j` (0-based) holds the rotary-encoded key and the value of the
/// state at position `j + 1`. The first `true_len` entries come from target
/// states; anything after them was predicted by the draft head.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    d: usize,
    capacity: usize,
    keys: Vec<S>,
    values: Vec<S>,
    filled: usize,
    true_len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(d: usize, capacity: usize) -> Self {
        Self {
            d,
            capacity,
            keys: vec![S::zero(); d * capacity],
            values: vec![S::zero(); d * capacity],
            filled: 0,
            true_len: 0,
        }
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn keys(&self) -> &[S] {
        &self.keys[..self.filled * self.d]
    }

    pub fn values(&self) -> &[S] {
        &self.values[..self.filled * self.d]
    }

    /// Project `state` and append it at position `filled + 1`.
    pub fn append(&mut self, head: &DraftHead<S>, state: &[S], is_true: bool) -> Result<()> {
        if state.len() != self.d {
            return Err(Error::shape(format!("state of width {} for a cache of width {}", state.len(), self.d)));
        }
        if self.filled >= self.capacity {
            return Err(Error::Capacity(format!("draft cache is full ({} entries)", self.capacity)));
        }
        if is_true && self.filled > self.true_len {
            return Err(Error::usage("cannot append a true state after draft entries"));
        }
        let mut g = Graph::inference();
        let vars = head.bind(&mut g, &Arc::new(Tensor::zeros(&[1, self.d])), false);
        let h = g.constant(Tensor::matrix(1, self.d, state.to_vec())?);
        let (k, v) = head.key_values(&mut g, &vars, h, &[self.filled + 1])?;
        let at = self.filled * self.d;
        self.keys[at..at + self.d].copy_from_slice(g.value(k).data());
        self.values[at..at + self.d].copy_from_slice(g.value(v).data());
        self.filled += 1;
        if is_true {
            self.true_len += 1;
        }
        Ok(())
    }

    /// Discard draft entries, then append the newly verified true states.
    pub fn reset_to_true(&mut self, head: &DraftHead<S>, new_true_states: &Tensor<S>) -> Result<()> {
        self.filled = self.true_len;
        if new_true_states.numel() == 0 {
            return Ok(());
        }
        for r in 0..new_true_states.rows() {
            self.append(head, new_true_states.row(r), true)?;
        }
        Ok(())
    }

    /// Drop every entry, true or not.
    pub fn clear(&mut self) {
        self.filled = 0;
        self.true_len = 0;
    }
}

/// One draft query against the cache.
#[derive(Clone, Debug)]
pub struct DraftStep<S> {
    /// Predicted state `ĥ_m`.
    pub state: Vec<S>,
    /// Logits of the distribution over the next token.
    pub logits: Vec<S>,
}

impl<S: Scalar> DraftHead<S> {
    /// Query with token `token` at position `pos` over every cached entry.
    /// The cache is left untouched.
    pub fn step(&self, embed: &Arc<Tensor<S>>, cache: &KvCache<S>, token: usize, pos: usize) -> Result<DraftStep<S>> {
        if cache.filled + 1 != pos {
            return Err(Error::State(format!("draft query at position {pos} needs {} cached entries, found {}", pos - 1, cache.filled)));
        }
        self.step_at(embed, cache, token, pos)
    }

    /// Like [`Self::step`], but the cache may end more than one position
    /// before `pos` (stale states).
    pub fn step_at(&self, embed: &Arc<Tensor<S>>, cache: &KvCache<S>, token: usize, pos: usize) -> Result<DraftStep<S>> {
        if cache.filled >= pos {
            return Err(Error::State(format!("draft query at position {pos} with {} cached entries", cache.filled)));
        }
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, embed, false);
        let n = cache.filled;
        let k = g.constant(Tensor::new(vec![n, cache.d], cache.keys().to_vec())?);
        let v = g.constant(Tensor::new(vec![n, cache.d], cache.values().to_vec())?);
        let allowed = vec![true; n];
        let h = self.block_on_keys(&mut g, &vars, &[token], &[pos], k, v, &allowed)?;
        let z = self.logits(&mut g, &vars, h)?;
        Ok(DraftStep { state: g.value(h).data().to_vec(), logits: g.value(z).data().to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::masks::strict_causal_mask;
    use crate::models::{ModelConfig, NORM_EPS, ROPE_BASE};

    fn setup() -> (DraftHead<f32>, Arc<Tensor<f32>>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig { d: 16, heads: 2, target_layers: 1, t_max: 32, vocab: 12 };
        let head = DraftHead::init(cfg, &mut rng).unwrap();
        let embed = Arc::new(Tensor::randn(&[12, 16], 0.5, &mut rng));
        (head, embed, rng)
    }

    #[test]
    fn ordering_contract() {
        let (head, _, _) = setup();
        let mut c = KvCache::new(16, 4);
        c.append(&head, &[0.1; 16], true).unwrap();
        c.append(&head, &[0.2; 16], false).unwrap();
        assert_eq!((c.true_len(), c.filled()), (1, 2));
        assert!(matches!(c.append(&head, &[0.3; 16], true), Err(Error::Usage(_))));
        c.append(&head, &[0.3; 16], false).unwrap();
        c.append(&head, &[0.3; 16], false).unwrap();
        assert!(matches!(c.append(&head, &[0.3; 16], false), Err(Error::Capacity(_))));
    }

    #[test]
    fn appended_projection_matches_direct_matmul() {
        let (head, _, mut rng) = setup();
        let state: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head64 = head.cast::<f64>();
        let mut c = KvCache::new(16, 4);
        c.append(&head64, &state, true).unwrap();
        c.append(&head64, &state, true).unwrap();
        let ms: f64 = state.iter().map(|v| v * v).sum::<f64>() / 16.0;
        let normed: Vec<f64> =
            state.iter().zip(head64.key_norm.data()).map(|(x, g)| x / (ms + NORM_EPS).sqrt() * g).collect();
        let n = Tensor::matrix(1, 16, normed).unwrap();
        let v = n.matmul(&head64.wv).unwrap();
        let k = n.matmul(&head64.wk).unwrap();
        assert!(c.values()[16..].iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        // position 2: rotate the raw projection by hand
        let mut rot = k.data().to_vec();
        crate::tensor::graph_rotate(&mut rot, 16, 2, &[2], ROPE_BASE, false);
        assert!(c.keys()[16..].iter().zip(&rot).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn step_matches_masked_batch_forward() {
        let (head, embed, mut rng) = setup();
        let t = 9;
        let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..12)).collect();
        let states = Tensor::<f32>::randn(&[t, 16], 1.0, &mut rng);
        let (batch, logits) = head.forward(&embed, &tokens, &states, &strict_causal_mask(t)).unwrap();
        let mut c = KvCache::new(16, t);
        for m in 1..=t {
            let s = head.step(&embed, &c, tokens[m - 1], m).unwrap();
            let again = head.step(&embed, &c, tokens[m - 1], m).unwrap();
            assert_eq!(s.state, again.state);
            for (a, b) in s.state.iter().zip(batch.row(m - 1)) {
                assert!((a - b).abs() <= 1e-6);
            }
            for (a, b) in s.logits.iter().zip(logits.row(m - 1)) {
                assert!((a - b).abs() <= 1e-6);
            }
            c.append(&head, states.row(m - 1), true).unwrap();
        }
        assert!(matches!(head.step(&embed, &c, 0, 3), Err(Error::State(_))));
    }

    #[test]
    fn reset_semantics() {
        let (head, _, mut rng) = setup();
        let mut c = KvCache::new(16, 16);
        let truth = Tensor::<f32>::randn(&[3, 16], 1.0, &mut rng);
        c.reset_to_true(&head, &truth).unwrap();
        c.append(&head, &[0.5; 16], false).unwrap();
        c.append(&head, &[0.5; 16], false).unwrap();
        c.reset_to_true(&head, &Tensor::zeros(&[0])).unwrap();
        assert_eq!((c.filled(), c.true_len()), (3, 3));

        let more = Tensor::<f32>::randn(&[2, 16], 1.0, &mut rng);
        let mut a = c.clone();
        a.reset_to_true(&head, &more).unwrap();
        let mut b = c.clone();
        b.reset_to_true(&head, &more).unwrap();
        assert_eq!(a.keys(), b.keys());
        assert_eq!((a.filled(), a.true_len()), (5, 5));
    }
}
