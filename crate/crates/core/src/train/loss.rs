//! Block-attention draft losses.
//!
//! Every loss here is an instance of one double sum over simulation steps
//! `i = 1..=s` and lookaheads `j`: in each window starting at `n`, the query
//! at `n + j` is scored against the target distribution `p_{n+j}` after
//! `i − 1` predicted states of that window have been written back as keys.

use crate::error::{Error, Result};
use crate::masks::{
    alloc_counter, inverse_block_mask, lookahead_mask_step, simulation_mask, simulation_mask_step, window_plan,
};
use crate::models::{probs_tensor, DraftHead, DraftVars, TargetModel};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Graph, Tensor, Var};

/// Target outputs for one sequence.
#[derive(Clone, Debug)]
pub struct TeacherRow<S> {
    /// Clean top-layer states `h*` `[T × d]`.
    pub states: Tensor<S>,
    /// Target next-token distributions `p` `[T × V]`.
    pub probs: Tensor<S>,
}

impl<S: Scalar> TeacherRow<S> {
    pub fn from_target(target: &TargetModel<S>, tokens: &[usize]) -> Result<Self> {
        let out = target.forward(tokens)?;
        Ok(Self { probs: probs_tensor(&out.logits), states: out.states })
    }

    pub fn from_logits(states: Tensor<S>, logits: &Tensor<S>) -> Self {
        Self { states, probs: probs_tensor(logits) }
    }
}

/// One training sequence as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct LossRow<'a, S> {
    pub tokens: &'a [usize],
    pub teacher: &'a TeacherRow<S>,
    /// Key states, usually `h*` plus noise.
    pub keys: &'a Tensor<S>,
}

/// Which lookaheads are scored at step `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookahead {
    /// Only `j = i`.
    Diagonal,
    /// Every `j` in `i..=l`.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub k: usize,
    pub steps: usize,
    pub lookahead: Lookahead,
    /// `β_{i,j}` stored row-major as `beta[(i−1)·k + (j−1)]`.
    pub beta: Vec<f64>,
    /// Feed the draft's own greedy token, rather than the true one, to the
    /// query that consumes a predicted state.
    pub draft_token_queries: bool,
}

/// `β*_i = k − i + 1` for `i = 1..=k`.
pub fn beta_star(k: usize) -> Vec<f64> {
    (1..=k).map(|i| (k - i + 1) as f64).collect()
}

impl LossSpec {
    /// Validated general form.
    pub fn general(k: usize, steps: usize, lookahead: Lookahead, beta: Vec<f64>) -> Result<Self> {
        if k == 0 || steps == 0 || steps > k {
            return Err(Error::validation(format!("need 1 ≤ s ≤ k, got s = {steps}, k = {k}")));
        }
        if let Lookahead::Fixed(l) = lookahead {
            if l < steps || l > k {
                return Err(Error::validation(format!("need s ≤ l ≤ k, got s = {steps}, l = {l}, k = {k}")));
            }
        }
        if beta.len() != k * k {
            return Err(Error::shape(format!("β table has {} entries, expected {}", beta.len(), k * k)));
        }
        let spec = Self { k, steps, lookahead, beta, draft_token_queries: false };
        for i in 1..=steps {
            for j in i..=spec.last(i) {
                let b = spec.weight(i, j);
                if !(b > 0.0 && b.is_finite()) {
                    return Err(Error::validation(format!("β[{i},{j}] = {b} must be positive")));
                }
            }
        }
        Ok(spec)
    }

    /// Multi-token loss on the inverse block mask: `(s, l, β) = (1, k, 1)`.
    pub fn early(k: usize) -> Result<Self> {
        Self::general(k, 1, Lookahead::Fixed(k), vec![1.0; k * k])
    }

    /// Simulation loss: `s` steps, diagonal terms, `β*` weights.
    pub fn late(k: usize, steps: usize) -> Result<Self> {
        let mut beta = vec![1.0; k * k];
        for (i, b) in beta_star(k).into_iter().enumerate() {
            beta[i * k + i] = b;
        }
        Self::general(k, steps, Lookahead::Diagonal, beta)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.beta[(i - 1) * self.k + (j - 1)]
    }

    fn last(&self, i: usize) -> usize {
        match self.lookahead {
            Lookahead::Diagonal => i,
            Lookahead::Fixed(l) => l,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// `Σ β·CE / N`.
    pub ce: f64,
    /// `Σ vloss / N`.
    pub vloss: f64,
    /// Unweighted CE summed per `(i, j)`, row-major `k × k`.
    pub ce_terms: Vec<f64>,
    /// Number of entries per `(i, j)`, row-major `k × k`.
    pub term_counts: Vec<usize>,
    /// Number of CE entries.
    pub n: usize,
    pub k: usize,
}

impl LossReport {
    /// Mean unweighted CE of term `(i, j)`, if any entry contributed.
    pub fn term_mean(&self, i: usize, j: usize) -> Option<f64> {
        let at = (i - 1) * self.k + (j - 1);
        (self.term_counts[at] > 0).then(|| self.ce_terms[at] / self.term_counts[at] as f64)
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub report: LossReport,
}

/// Build the loss on `g` for a batch of rows sharing one window offset.
pub fn general_loss<S: Scalar>(
    g: &mut Graph<S>,
    head: &DraftHead<S>,
    vars: &DraftVars,
    rows: &[LossRow<'_, S>],
    offset: usize,
    spec: &LossSpec,
    vloss_coef: f64,
) -> Result<LossOutput> {
    let k = spec.k;
    let mut ce_terms = vec![0.0; k * k];
    let mut term_counts = vec![0usize; k * k];
    let mut ce_parts = Vec::new();
    let mut vl_parts = Vec::new();
    let mut n = 0usize;
    let d = head.config.d;

    for row in rows {
        let t = row.tokens.len();
        if row.keys.rows() != t || row.teacher.states.rows() != t || row.teacher.probs.rows() != t {
            return Err(Error::shape(format!(
                "row of {t} tokens with {} key states, {} target states, {} distributions",
                row.keys.rows(),
                row.teacher.states.rows(),
                row.teacher.probs.rows()
            )));
        }
        if t == 0 {
            continue;
        }
        let plan = window_plan(t, k, offset)?;
        let slots = spec.steps > 1;
        let mut mask = if slots { simulation_mask(&plan) } else { inverse_block_mask(&plan) };
        let key_rows = if slots { 2 * t } else { t };
        let mut buf = Vec::with_capacity(key_rows * d);
        buf.extend_from_slice(row.keys.data());
        buf.resize(key_rows * d, S::zero());
        alloc_counter::bump();
        let keys = g.constant(Tensor::matrix(key_rows, d, buf)?);
        let mut tokens = row.tokens.to_vec();
        let mut predicted: Vec<Option<usize>> = vec![None; plan.windows.len()];

        for i in 1..=spec.steps {
            if i > 1 {
                match spec.lookahead {
                    Lookahead::Diagonal => simulation_mask_step(&mut mask, &plan, i)?,
                    Lookahead::Fixed(l) => lookahead_mask_step(&mut mask, &plan, i, l)?,
                }
                if spec.draft_token_queries {
                    tokens.copy_from_slice(row.tokens);
                    for (w, p) in plan.windows.iter().zip(&predicted) {
                        if let (Some(q), Some(tok)) = (w.query(i), p) {
                            tokens[q - 1] = *tok;
                        }
                    }
                }
            }
            let h = head.block_forward(g, vars, &tokens, keys, &mask)?;
            for j in i..=spec.last(i) {
                let ids: Vec<usize> = plan.windows.iter().filter_map(|w| w.query(j)).map(|q| q - 1).collect();
                if ids.is_empty() {
                    continue;
                }
                let hs = g.gather_rows(h, &ids)?;
                let z = head.logits(g, vars, hs)?;
                let target = gather(&row.teacher.probs, &ids)?;
                let beta = spec.weight(i, j);
                let ce = g.soft_cross_entropy(&target, z, &vec![S::of(beta); ids.len()])?;
                let at = (i - 1) * k + (j - 1);
                ce_terms[at] += g.value(ce).item().f64() / beta;
                term_counts[at] += ids.len();
                if spec.draft_token_queries && j == i && i < spec.steps {
                    let zv = g.value(z);
                    let mut r = 0;
                    for (w, p) in plan.windows.iter().zip(predicted.iter_mut()) {
                        if w.query(j).is_some() {
                            *p = Some(argmax(zv.row(r)));
                            r += 1;
                        }
                    }
                }
                let clean = g.constant(gather(&row.teacher.states, &ids)?);
                let vl = g.smooth_l1(hs, clean)?;
                let vl = g.scale(vl, S::usize(ids.len()));
                ce_parts.push(ce);
                vl_parts.push(vl);
                n += ids.len();
            }
            if i < spec.steps {
                let (dst, src): (Vec<usize>, Vec<usize>) =
                    plan.windows.iter().filter_map(|w| w.query(i)).map(|q| (t + q - 1, q - 1)).unzip();
                g.write_rows(keys, &dst, h, &src)?;
            }
        }
    }
    if n == 0 {
        return Err(Error::validation("batch has no loss-bearing positions"));
    }
    let ce_sum = sum_vars(g, &ce_parts)?;
    let vl_sum = sum_vars(g, &vl_parts)?;
    let inv_n = S::one() / S::usize(n);
    let ce = g.scale(ce_sum, inv_n);
    let vl = g.scale(vl_sum, inv_n);
    let weighted = g.scale(vl, S::of(vloss_coef));
    let loss = g.add(ce, weighted)?;
    let report = LossReport {
        total: g.value(loss).item().f64(),
        ce: g.value(ce).item().f64(),
        vloss: g.value(vl).item().f64(),
        ce_terms,
        term_counts,
        n,
        k,
    };
    Ok(LossOutput { loss, report })
}

pub fn early_stage_loss<S: Scalar>(
    g: &mut Graph<S>,
    head: &DraftHead<S>,
    vars: &DraftVars,
    rows: &[LossRow<'_, S>],
    k: usize,
    offset: usize,
    vloss_coef: f64,
) -> Result<LossOutput> {
    general_loss(g, head, vars, rows, offset, &LossSpec::early(k)?, vloss_coef)
}

pub fn late_stage_loss<S: Scalar>(
    g: &mut Graph<S>,
    head: &DraftHead<S>,
    vars: &DraftVars,
    rows: &[LossRow<'_, S>],
    k: usize,
    steps: usize,
    offset: usize,
    vloss_coef: f64,
) -> Result<LossOutput> {
    general_loss(g, head, vars, rows, offset, &LossSpec::late(k, steps)?, vloss_coef)
}

fn gather<S: Scalar>(t: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let c = t.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &r in ids {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(ids.len(), c, data)
}

fn sum_vars<S: Scalar>(g: &mut Graph<S>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}
