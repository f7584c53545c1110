use std::sync::Arc;

use rand::Rng;

use super::{bind, init_matrix, load_named, ones, ModelConfig, NamedParams, NORM_EPS, ROPE_BASE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TargetLayer<S> {
    pub attn_norm: Arc<Tensor<S>>,
    pub wq: Arc<Tensor<S>>,
    pub wk: Arc<Tensor<S>>,
    pub wv: Arc<Tensor<S>>,
    pub wo: Arc<Tensor<S>>,
    pub mlp_norm: Arc<Tensor<S>>,
    pub w_up: Arc<Tensor<S>>,
    pub w_down: Arc<Tensor<S>>,
}

/// Decoder-only causal LM with a weight-tied head. Its post-norm top-layer
/// states are the "true states" the draft head attends to.
#[derive(Clone, Debug)]
pub struct TargetModel<S> {
    pub config: ModelConfig,
    pub embed: Arc<Tensor<S>>,
    pub layers: Vec<TargetLayer<S>>,
    pub final_norm: Arc<Tensor<S>>,
}

pub struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_up: Var,
    w_down: Var,
}

/// Graph handles for every target parameter, in [`TargetModel::named_params`] order.
pub struct TargetVars {
    pub embed: Var,
    layers: Vec<LayerVars>,
    pub final_norm: Var,
}

impl TargetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for l in &self.layers {
            v.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_up, l.w_down]);
        }
        v.push(self.final_norm);
        v
    }
}

/// Per-layer rotary-encoded keys and values of processed tokens.
#[derive(Clone, Debug)]
pub struct TargetCache<S> {
    d: usize,
    len: usize,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
}

impl<S: Scalar> TargetCache<S> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d: config.d,
            len: 0,
            keys: vec![Vec::new(); config.target_layers],
            values: vec![Vec::new(); config.target_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop every entry past `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.d);
            v.truncate(len * self.d);
        }
        self.len = len;
    }
}

#[derive(Clone, Debug)]
pub struct TargetOutput<S> {
    /// Post-norm top-layer states `[m × d]`.
    pub states: Tensor<S>,
    /// Next-token logits `[m × V]`.
    pub logits: Tensor<S>,
}

impl<S: Scalar> TargetModel<S> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::init_scaled(config, 1.0, rng)
    }

    /// Every weight zero and every norm gain one; a shell for loading.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let z = |r, c| Arc::new(Tensor::zeros(&[r, c]));
        let layers = (0..config.target_layers)
            .map(|_| TargetLayer {
                attn_norm: ones(d),
                wq: z(d, d),
                wk: z(d, d),
                wv: z(d, d),
                wo: z(d, d),
                mlp_norm: ones(d),
                w_up: z(d, 4 * d),
                w_down: z(4 * d, d),
            })
            .collect();
        Ok(Self { config, embed: z(config.vocab, d), layers, final_norm: ones(d) })
    }

    /// Initialise with projection standard deviations multiplied by `gain`.
    pub fn init_scaled<R: Rng + ?Sized>(config: ModelConfig, gain: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let std = gain / (d as f64).sqrt();
        let out_std = std / (2.0 * config.target_layers.max(1) as f64).sqrt();
        let embed = init_matrix(config.vocab, d, 0.02 * gain.max(1.0), rng);
        let layers = (0..config.target_layers)
            .map(|_| TargetLayer {
                attn_norm: ones(d),
                wq: init_matrix(d, d, std, rng),
                wk: init_matrix(d, d, std, rng),
                wv: init_matrix(d, d, std, rng),
                wo: init_matrix(d, d, out_std, rng),
                mlp_norm: ones(d),
                w_up: init_matrix(d, 4 * d, std, rng),
                w_down: init_matrix(4 * d, d, out_std / 2.0, rng),
            })
            .collect();
        Ok(Self { config, embed, layers, final_norm: ones(d) })
    }

    pub fn named_params(&self) -> NamedParams<S> {
        let mut out = vec![("embed".to_string(), Arc::clone(&self.embed))];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), Arc::clone(t)));
            }
        }
        out.push(("final_norm".to_string(), Arc::clone(&self.final_norm)));
        out
    }

    /// Replace parameters in [`Self::named_params`] order.
    pub fn set_params(&mut self, params: Vec<Arc<Tensor<S>>>) -> Result<()> {
        let names = self.named_params();
        if params.len() != names.len() {
            return Err(Error::shape(format!("{} tensors for {} target parameters", params.len(), names.len())));
        }
        let named: NamedParams<S> = names.into_iter().map(|(n, _)| n).zip(params).collect();
        self.load(&named)
    }

    pub fn load(&mut self, params: &NamedParams<S>) -> Result<()> {
        let mut slots: Vec<(String, &mut Arc<Tensor<S>>)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            slots.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            slots.push((format!("layers.{i}.wq"), &mut l.wq));
            slots.push((format!("layers.{i}.wk"), &mut l.wk));
            slots.push((format!("layers.{i}.wv"), &mut l.wv));
            slots.push((format!("layers.{i}.wo"), &mut l.wo));
            slots.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            slots.push((format!("layers.{i}.w_up"), &mut l.w_up));
            slots.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        slots.push(("final_norm".into(), &mut self.final_norm));
        let mut refs: Vec<(&str, &mut Arc<Tensor<S>>)> = slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        load_named(&mut refs, params)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> TargetModel<T> {
        let c = |t: &Arc<Tensor<S>>| Arc::new(t.cast::<T>());
        TargetModel {
            config: self.config,
            embed: c(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| TargetLayer {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    mlp_norm: c(&l.mlp_norm),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
        }
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> TargetVars {
        let embed = bind(g, &self.embed, trainable);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: bind(g, &l.attn_norm, trainable),
                wq: bind(g, &l.wq, trainable),
                wk: bind(g, &l.wk, trainable),
                wv: bind(g, &l.wv, trainable),
                wo: bind(g, &l.wo, trainable),
                mlp_norm: bind(g, &l.mlp_norm, trainable),
                w_up: bind(g, &l.w_up, trainable),
                w_down: bind(g, &l.w_down, trainable),
            })
            .collect();
        let final_norm = bind(g, &self.final_norm, trainable);
        TargetVars { embed, layers, final_norm }
    }

    /// Causal forward over `tokens`, which occupy positions `cache.len()+1 …`.
    ///
    /// Returns `(states, logits)`. With a cache, keys and values of the new
    /// tokens are appended to it; the graph should then be an inference graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        vars: &TargetVars,
        tokens: &[usize],
        mut cache: Option<&mut TargetCache<S>>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let m = tokens.len();
        let start = cache.as_ref().map_or(0, |c| c.len);
        if m == 0 {
            return Err(Error::shape("target forward over zero tokens"));
        }
        if start + m > cfg.t_max {
            return Err(Error::Capacity(format!("{} positions exceed t_max = {}", start + m, cfg.t_max)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::validation(format!("token {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let positions: Vec<usize> = (start + 1..=start + m).collect();
        let total = start + m;
        let mut allowed = vec![false; m * total];
        for r in 0..m {
            for j in 0..=start + r {
                allowed[r * total + j] = true;
            }
        }
        let mut x = g.embedding(vars.embed, tokens)?;
        for (li, lv) in vars.layers.iter().enumerate() {
            let h = g.rms_norm(x, lv.attn_norm, NORM_EPS)?;
            let q = g.matmul(h, lv.wq)?;
            let q = g.rope(q, cfg.heads, &positions, ROPE_BASE)?;
            let k = g.matmul(h, lv.wk)?;
            let k = g.rope(k, cfg.heads, &positions, ROPE_BASE)?;
            let v = g.matmul(h, lv.wv)?;
            let (k, v) = match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[li].extend_from_slice(g.value(k).data());
                    c.values[li].extend_from_slice(g.value(v).data());
                    let kt = Tensor::matrix(total, cfg.d, c.keys[li].clone())?;
                    let vt = Tensor::matrix(total, cfg.d, c.values[li].clone())?;
                    (g.constant(kt), g.constant(vt))
                }
                None => (k, v),
            };
            let a = g.attention(q, k, v, cfg.heads, &allowed)?;
            let a = g.matmul(a, lv.wo)?;
            x = g.add(x, a)?;
            let h = g.rms_norm(x, lv.mlp_norm, NORM_EPS)?;
            let u = g.matmul(h, lv.w_up)?;
            let u = g.silu(u);
            let u = g.matmul(u, lv.w_down)?;
            x = g.add(x, u)?;
        }
        if let Some(c) = cache {
            c.len = total;
        }
        let states = g.rms_norm(x, vars.final_norm, NORM_EPS)?;
        let head = g.transpose(vars.embed)?;
        let logits = g.matmul(states, head)?;
        Ok((states, logits))
    }

    /// Full recompute over `tokens` from position 1.
    pub fn forward(&self, tokens: &[usize]) -> Result<TargetOutput<S>> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let (s, l) = self.forward_graph(&mut g, &vars, tokens, None)?;
        Ok(TargetOutput { states: g.value(s).clone(), logits: g.value(l).clone() })
    }

    /// Process `tokens` after the cached prefix and extend the cache.
    pub fn forward_incremental(&self, cache: &mut TargetCache<S>, tokens: &[usize]) -> Result<TargetOutput<S>> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let (s, l) = self.forward_graph(&mut g, &vars, tokens, Some(cache))?;
        Ok(TargetOutput { states: g.value(s).clone(), logits: g.value(l).clone() })
    }
}
