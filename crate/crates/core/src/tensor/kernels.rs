//! Slice-level numeric kernels.
//!
//! Each output row of [`matmul`] is reduced over the inner extent in
//! ascending order, independent of how many rows are processed together.
//! Incremental decoding relies on this to stay bit-identical to a full
//! recompute.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` for `a[m×k]`, `c[m×n]`.
pub fn matmul_at_b<S: Scalar>(a: &[S], c: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
}

/// `out[m×k] += c · bᵀ` for `c[m×n]`, `b[k×n]`.
pub fn matmul_a_bt<S: Scalar>(c: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul(c, &bt, out, m, n, k);
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let sig = S::one() / (S::one() + (-x).exp());
    sig * (S::one() + x * (S::one() - sig))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; m * n];
            matmul(&a, &b, &mut out, m, k, n);
            let want = triple_loop(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut got = vec![0.0; k * n];
        matmul_at_b(&a, &c, &mut got, m, k, n);
        let want = triple_loop(&transpose(&a, m, k), &c, k, m, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut got = vec![0.0; m * k];
        matmul_a_bt(&c, &b, &mut got, m, k, n);
        let want = triple_loop(&c, &transpose(&b, k, n), m, n, k);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_results_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (6, 33, 17);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut full = vec![0.0; m * n];
        matmul(&a, &b, &mut full, m, k, n);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul(&a[i * k..(i + 1) * k], &b, &mut row, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &row[..]);
        }
    }
}
