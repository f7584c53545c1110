use std::sync::Arc;

use rand::Rng;

use super::{bind, init_matrix, load_named, ones, ModelConfig, NamedParams, NORM_EPS, ROPE_BASE};
use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Single cross-attention block: token-embedding queries attend to
/// higher-level states, followed by a pointwise MLP. Both sublayers are
/// pre-norm with residual connections. The embedding and LM head are the
/// target's and stay frozen.
///
/// `wq`, `wk`, `wv` are `d × d`; columns `h·d_h .. (h+1)·d_h` hold the
/// projection of head `h`.
#[derive(Clone, Debug)]
pub struct DraftHead<S> {
    pub config: ModelConfig,
    pub query_norm: Arc<Tensor<S>>,
    pub key_norm: Arc<Tensor<S>>,
    pub wq: Arc<Tensor<S>>,
    pub wk: Arc<Tensor<S>>,
    pub wv: Arc<Tensor<S>>,
    pub wo: Arc<Tensor<S>>,
    pub mlp_norm: Arc<Tensor<S>>,
    pub w_up: Arc<Tensor<S>>,
    pub w_down: Arc<Tensor<S>>,
    pub final_norm: Arc<Tensor<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct DraftVars {
    pub query_norm: Var,
    pub key_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub final_norm: Var,
    /// Shared (frozen) embedding table, also used transposed as the LM head.
    pub embed: Var,
}

impl DraftVars {
    /// Trainable parameters in [`DraftHead::named_params`] order.
    pub fn params(&self) -> [Var; 10] {
        [
            self.query_norm,
            self.key_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.mlp_norm,
            self.w_up,
            self.w_down,
            self.final_norm,
        ]
    }
}

const NAMES: [&str; 10] =
    ["query_norm", "key_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down", "final_norm"];

impl<S: Scalar> DraftHead<S> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            config,
            query_norm: ones(d),
            key_norm: ones(d),
            wq: init_matrix(d, d, std, rng),
            wk: init_matrix(d, d, std, rng),
            wv: init_matrix(d, d, std, rng),
            wo: init_matrix(d, d, std / 2.0, rng),
            mlp_norm: ones(d),
            w_up: init_matrix(d, 4 * d, std, rng),
            w_down: init_matrix(4 * d, d, std / 4.0, rng),
            final_norm: ones(d),
        })
    }

    /// All projection weights zero and every norm gain one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let z = |r, c| Arc::new(Tensor::zeros(&[r, c]));
        Ok(Self {
            config,
            query_norm: ones(d),
            key_norm: ones(d),
            wq: z(d, d),
            wk: z(d, d),
            wv: z(d, d),
            wo: z(d, d),
            mlp_norm: ones(d),
            w_up: z(d, 4 * d),
            w_down: z(4 * d, d),
            final_norm: ones(d),
        })
    }

    fn tensors(&self) -> [&Arc<Tensor<S>>; 10] {
        [
            &self.query_norm,
            &self.key_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_down,
            &self.final_norm,
        ]
    }

    pub fn named_params(&self) -> NamedParams<S> {
        NAMES.iter().zip(self.tensors()).map(|(n, t)| (n.to_string(), Arc::clone(t))).collect()
    }

    pub fn load(&mut self, params: &NamedParams<S>) -> Result<()> {
        let mut slots: Vec<(&str, &mut Arc<Tensor<S>>)> = vec![
            ("query_norm", &mut self.query_norm),
            ("key_norm", &mut self.key_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
            ("final_norm", &mut self.final_norm),
        ];
        load_named(&mut slots, params)
    }

    /// Replace parameters in [`Self::named_params`] order.
    pub fn set_params(&mut self, params: Vec<Arc<Tensor<S>>>) -> Result<()> {
        if params.len() != NAMES.len() {
            return Err(Error::shape(format!("{} tensors for {} draft parameters", params.len(), NAMES.len())));
        }
        let named: NamedParams<S> = NAMES.iter().map(|n| n.to_string()).zip(params).collect();
        self.load(&named)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> DraftHead<T> {
        let c = |t: &Arc<Tensor<S>>| Arc::new(t.cast::<T>());
        DraftHead {
            config: self.config,
            query_norm: c(&self.query_norm),
            key_norm: c(&self.key_norm),
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: c(&self.wo),
            mlp_norm: c(&self.mlp_norm),
            w_up: c(&self.w_up),
            w_down: c(&self.w_down),
            final_norm: c(&self.final_norm),
        }
    }

    pub fn bind(&self, g: &mut Graph<S>, embed: &Arc<Tensor<S>>, trainable: bool) -> DraftVars {
        DraftVars {
            query_norm: bind(g, &self.query_norm, trainable),
            key_norm: bind(g, &self.key_norm, trainable),
            wq: bind(g, &self.wq, trainable),
            wk: bind(g, &self.wk, trainable),
            wv: bind(g, &self.wv, trainable),
            wo: bind(g, &self.wo, trainable),
            mlp_norm: bind(g, &self.mlp_norm, trainable),
            w_up: bind(g, &self.w_up, trainable),
            w_down: bind(g, &self.w_down, trainable),
            final_norm: bind(g, &self.final_norm, trainable),
            embed: g.constant_shared(embed),
        }
    }

    /// Rotary-encoded keys and values of higher-level states at `positions`.
    pub fn key_values(&self, g: &mut Graph<S>, vars: &DraftVars, states: Var, positions: &[usize]) -> Result<(Var, Var)> {
        let kn = g.rms_norm(states, vars.key_norm, NORM_EPS)?;
        let k = g.matmul(kn, vars.wk)?;
        let k = g.rope(k, self.config.heads, positions, ROPE_BASE)?;
        let v = g.matmul(kn, vars.wv)?;
        Ok((k, v))
    }

    /// The block applied to already-projected keys and values.
    ///
    /// `query_positions[r]` is the position of query row `r`; `allowed` is
    /// the row-major `queries × keys` admissibility matrix.
    pub fn block_on_keys(
        &self,
        g: &mut Graph<S>,
        vars: &DraftVars,
        tokens: &[usize],
        query_positions: &[usize],
        keys: Var,
        values: Var,
        allowed: &[bool],
    ) -> Result<Var> {
        let cfg = &self.config;
        let e = g.embedding(vars.embed, tokens)?;
        let qn = g.rms_norm(e, vars.query_norm, NORM_EPS)?;
        let q = g.matmul(qn, vars.wq)?;
        let q = g.rope(q, cfg.heads, query_positions, ROPE_BASE)?;
        let o = g.attention(q, keys, values, cfg.heads, allowed)?;
        let o = g.matmul(o, vars.wo)?;
        let y = g.add(o, e)?;
        let m = g.rms_norm(y, vars.mlp_norm, NORM_EPS)?;
        let u = g.matmul(m, vars.w_up)?;
        let u = g.silu(u);
        let u = g.matmul(u, vars.w_down)?;
        g.add(u, y)
    }

    /// Masked forward for queries at positions `1..=T`.
    ///
    /// `key_states` holds the true states for positions `1..=T`, followed,
    /// when the mask carries slots, by `T` predicted-state slots.
    pub fn block_forward(
        &self,
        g: &mut Graph<S>,
        vars: &DraftVars,
        tokens: &[usize],
        key_states: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let t = tokens.len();
        if mask.len() != t {
            return Err(Error::shape(format!("mask covers {} queries, got {t} tokens", mask.len())));
        }
        let rows = g.value(key_states).rows();
        if rows != mask.key_count() {
            return Err(Error::shape(format!("{rows} key states for a mask with {} keys", mask.key_count())));
        }
        let query_positions: Vec<usize> = (1..=t).collect();
        let key_positions: Vec<usize> = (0..rows).map(|c| c % t + 1).collect();
        let (k, v) = self.key_values(g, vars, key_states, &key_positions)?;
        self.block_on_keys(g, vars, tokens, &query_positions, k, v, mask.as_slice())
    }

    /// `z = e⁻¹(norm(ĥ))`.
    pub fn logits(&self, g: &mut Graph<S>, vars: &DraftVars, states: Var) -> Result<Var> {
        let n = g.rms_norm(states, vars.final_norm, NORM_EPS)?;
        let head = g.transpose(vars.embed)?;
        g.matmul(n, head)
    }

    /// Inference-only batch forward; returns `(states, logits)`.
    pub fn forward(
        &self,
        embed: &Arc<Tensor<S>>,
        tokens: &[usize],
        key_states: &Tensor<S>,
        mask: &AttentionMask,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, embed, false);
        let ks = g.constant(key_states.clone());
        let h = self.block_forward(&mut g, &vars, tokens, ks, mask)?;
        let z = self.logits(&mut g, &vars, h)?;
        Ok((g.value(h).clone(), g.value(z).clone()))
    }
}
