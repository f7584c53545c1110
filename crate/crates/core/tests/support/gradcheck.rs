//! Central finite-difference checks at f64.

use std::sync::Arc;

use beagle::masks::{inverse_block_mask, window_plan};
use beagle::models::{DraftHead, ModelConfig, TargetModel};
use beagle::train::{general_loss, inject_state_noise, LossRow, LossSpec, TeacherRow};
use beagle::{Graph64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

pub type Build<'a> = dyn Fn(&mut Graph64, &[Var]) -> Var + 'a;

/// Max relative error between backprop and central differences of
/// `Σ R ⊙ f(inputs)` for a fixed random `R`.
pub fn check_op(seed: u64, inputs: &[Tensor64], f: &Build<'_>) -> f64 {
    let eval = |ins: &[Tensor64], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph64::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars);
        let shape = g.value(y).shape().to_vec();
        let r = g.constant(Tensor64::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc)));
        let p = g.mul(y, r).unwrap();
        let loss = g.sum(p);
        let v = g.value(loss).item();
        if !grads {
            return (v, vec![]);
        }
        g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(ins)
            .map(|(&x, t)| g.grad(x).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (v, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (a, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[a].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[a].data_mut()[i] -= H;
            let n = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[a][i], n));
        }
    }
    worst
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::randn(shape, 1.0, rng)
}

/// Worst relative error of every differentiable op for one seed.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (3, 4, 2);
    let a = rand_t(&[m, k], rng);
    let b = rand_t(&[k, n], rng);
    let c = rand_t(&[m, k], rng);
    let gain = rand_t(&[k], rng);
    let ids = [2usize, 0, 2, 1];
    let mut allowed = vec![false; 4 * 5];
    for (i, v) in allowed.iter_mut().enumerate() {
        *v = rng.gen_bool(0.6) && i % 5 != 4;
    }
    allowed[0] = true;
    let positions = [1usize, 2, 3];

    let cases: Vec<(&str, Vec<Tensor64>, Box<Build<'_>>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add", vec![a.clone(), c.clone()], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![a.clone(), c.clone()], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![a.clone(), c.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0]))),
        ("rms_norm", vec![a.clone(), gain.clone()], Box::new(|g, v| g.rms_norm(v[0], v[1], 1e-6).unwrap())),
        ("silu", vec![a.clone()], Box::new(|g, v| g.silu(v[0]))),
        ("gather_rows", vec![rand_t(&[3, k], rng)], Box::new(move |g, v| g.gather_rows(v[0], &ids).unwrap())),
        ("embedding", vec![rand_t(&[3, k], rng)], Box::new(move |g, v| g.embedding(v[0], &ids[..2]).unwrap())),
        ("concat_rows", vec![a.clone(), rand_t(&[2, k], rng)], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap())),
        ("concat_cols", vec![a.clone(), rand_t(&[m, 2], rng)], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap())),
        ("slice_rows", vec![a.clone()], Box::new(|g, v| g.slice_rows(v[0], 1, 3).unwrap())),
        ("slice_cols", vec![a.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 3).unwrap())),
        ("transpose", vec![a.clone()], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("softmax", vec![a.clone()], Box::new(|g, v| g.softmax(v[0]))),
        ("log_softmax", vec![a.clone()], Box::new(|g, v| g.log_softmax(v[0]))),
        (
            "soft_cross_entropy",
            vec![a.clone()],
            Box::new(|g, v| {
                let p = Tensor64::from_rows(&[
                    vec![0.1, 0.2, 0.3, 0.4],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.25, 0.25, 0.25, 0.25],
                ])
                .unwrap();
                g.soft_cross_entropy(&p, v[0], &[1.0, 2.0, 0.5]).unwrap()
            }),
        ),
        ("smooth_l1", vec![a.scale_for_test(1.5), c.clone()], Box::new(|g, v| g.smooth_l1(v[0], v[1]).unwrap())),
        (
            "attention",
            vec![rand_t(&[4, 4], rng), rand_t(&[5, 4], rng), rand_t(&[5, 4], rng)],
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], 2, &allowed).unwrap()),
        ),
        ("rope", vec![a.clone()], Box::new(move |g, v| g.rope(v[0], 2, &positions, 10_000.0).unwrap())),
        (
            "write_rows",
            vec![rand_t(&[2, k], rng), rand_t(&[k, k], rng)],
            Box::new(|g, v| {
                let buf = g.constant(Tensor64::zeros(&[4, 4]));
                g.write_rows(buf, &[3, 1], v[0], &[0, 1]).unwrap();
                let h = g.matmul(buf, v[1]).unwrap();
                g.silu(h)
            }),
        ),
    ];
    cases.iter().map(|(name, inputs, f)| (*name, check_op(seed, inputs, f.as_ref()))).collect()
}

trait ScaleForTest {
    fn scale_for_test(&self, c: f64) -> Self;
}

impl ScaleForTest for Tensor64 {
    fn scale_for_test(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }
}

pub fn micro(seed: u64) -> (TargetModel<f64>, DraftHead<f64>, Vec<Vec<usize>>) {
    let cfg = ModelConfig { d: 8, heads: 2, target_layers: 1, t_max: 16, vocab: 10 };
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let target = TargetModel::init_scaled(cfg, 2.0, rng).unwrap();
    let head = DraftHead::init(cfg, rng).unwrap();
    let rows = (0..2).map(|_| (0..12).map(|_| rng.gen_range(0..10)).collect()).collect();
    (target, head, rows)
}

/// Max relative error of the loss gradient over three random coordinates
/// of every draft parameter.
pub fn check_loss(seed: u64, spec: &LossSpec) -> f64 {
    let (target, head, tokens) = micro(seed);
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let teachers: Vec<TeacherRow<f64>> = tokens.iter().map(|t| TeacherRow::from_target(&target, t).unwrap()).collect();
    let keys: Vec<Tensor64> = teachers.iter().map(|t| inject_state_noise(&t.states, 0.2, rng).unwrap()).collect();
    let offset = rng.gen_range(0..spec.k);
    let loss_of = |h: &DraftHead<f64>, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let rows: Vec<LossRow<'_, f64>> = tokens
            .iter()
            .zip(&teachers)
            .zip(&keys)
            .map(|((t, teacher), keys)| LossRow { tokens: t, teacher, keys })
            .collect();
        let mut g = Graph64::new();
        let vars = h.bind(&mut g, &target.embed, true);
        let out = general_loss(&mut g, h, &vars, &rows, offset, spec, 10.0).unwrap();
        let v = g.value(out.loss).item();
        if !grads {
            return (v, vec![]);
        }
        g.backward(out.loss).unwrap();
        (v, vars.params().iter().map(|&p| g.grad(p).unwrap().to_vec()).collect())
    };
    let (_, analytic) = loss_of(&head, true);
    let params: Vec<Arc<Tensor64>> = head.named_params().into_iter().map(|(_, t)| t).collect();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for _ in 0..3 {
            let i = rng.gen_range(0..p.numel());
            let shifted = |delta: f64| {
                let mut ps = params.clone();
                Arc::make_mut(&mut ps[pi]).data_mut()[i] += delta;
                let mut h = head.clone();
                h.set_params(ps).unwrap();
                loss_of(&h, false).0
            };
            let n = (shifted(H) - shifted(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[pi][i], n));
        }
    }
    worst
}

/// Relative error of the draft block's gradient with respect to its key states.
pub fn block_error(seed: u64) -> f64 {
    let (target, head, tokens) = micro(seed);
    let plan = window_plan(12, 3, 1).unwrap();
    let mask = inverse_block_mask(&plan);
    let states = target.forward(&tokens[0]).unwrap().states;
    let build = |g: &mut Graph64, v: &[Var]| {
        let vars = head.bind(g, &target.embed, true);
        head.block_forward(g, &vars, &tokens[0], v[0], &mask).unwrap()
    };
    check_op(seed, &[states], &build)
}
