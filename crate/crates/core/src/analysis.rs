//! Acceptance-length arithmetic for chain speculative decoding.
//!
//! `α^{(i)}` is the probability that drafted position `i` is accepted given
//! that every earlier position was. The accepted length `L ∈ [0, k]` excludes
//! the correction or bonus token, so a measured `τ` equals `L + 1`.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::specdec::{alpha_from_masks, sample};

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptanceProfile {
    alpha: Vec<f64>,
}

impl AcceptanceProfile {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::validation(format!("acceptance rate {a} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }

    pub fn constant(a: f64, k: usize) -> Result<Self> {
        Self::new(vec![a; k])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationModel {
    pub alpha1: f64,
    pub r: f64,
}

impl DegradationModel {
    pub fn new(alpha1: f64, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha1) {
            return Err(Error::validation(format!("α₁ = {alpha1} outside [0, 1]")));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::validation(format!("rate r = {r} outside (0, 1]")));
        }
        Ok(Self { alpha1, r })
    }
}

/// `E[L] = Σ_i Π_{j≤i} α^{(j)}`.
pub fn expected_acceptance_length(profile: &AcceptanceProfile) -> f64 {
    let mut prod = 1.0;
    let mut total = 0.0;
    for &a in profile.alpha() {
        prod *= a;
        total += prod;
    }
    total
}

/// First-order surrogate `J = Σ_i (k − i + 1)·ln α^{(i)} + k`.
pub fn taylor_surrogate_j(profile: &AcceptanceProfile) -> Result<f64> {
    let k = profile.k();
    let mut j = k as f64;
    for (i, &a) in profile.alpha().iter().enumerate() {
        if a <= 0.0 {
            return Err(Error::Domain(format!("ln α at position {} is undefined for α = 0", i + 1)));
        }
        j += (k - i) as f64 * a.ln();
    }
    Ok(j)
}

/// Second-order remainder bound `Σ_i (Σ_{j≤i} ln α^{(j)})² / 2` on `E[L] − J`.
pub fn taylor_remainder_bound(profile: &AcceptanceProfile) -> Result<f64> {
    taylor_surrogate_j(profile)?;
    let mut s = 0.0;
    let mut bound = 0.0;
    for &a in profile.alpha() {
        s += a.ln();
        bound += s * s / 2.0;
    }
    Ok(bound)
}

/// `α^{(i)} = r^{i−1}·α^{(1)}`.
pub fn geometric_profile(model: &DegradationModel, k: usize) -> Result<AcceptanceProfile> {
    AcceptanceProfile::new((0..k).map(|i| model.alpha1 * model.r.powi(i as i32)).collect())
}

/// Least-squares fit of `ln α^{(i)} = ln α^{(1)} + (i − 1)·ln r`; `None`
/// when fewer than two positions or any rate is zero.
pub fn fit_geometric_r(profile: &AcceptanceProfile) -> Option<f64> {
    let k = profile.k();
    if k < 2 || profile.alpha().iter().any(|&a| a <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = (0..k).map(|i| i as f64).collect();
    let ys: Vec<f64> = profile.alpha().iter().map(|a| a.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some((sxy / sxx).exp())
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
        return Err(Error::validation(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `−E_p[ln q]`; `q` must be positive wherever `p` is.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let mut ce = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::Domain(format!("q({i}) = 0 where p({i}) = {a}")));
            }
            ce -= a * b.ln();
        }
    }
    Ok(ce)
}

/// `E_p[q]`.
pub fn expected_q(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JensenCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `−E_p[ln q] ≥ −ln E_p[q]`.
pub fn jensen_gap_check(p: &[f64], q: &[f64]) -> Result<JensenCheck> {
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let lhs = cross_entropy(p, q)?;
    let rhs = -expected_q(p, q).ln();
    Ok(JensenCheck { lhs, rhs, holds: lhs >= rhs - 1e-12 })
}

/// Per-window distributions for the two loss forms.
///
/// `late[i−1]` is `(p_{n+i}, q^{(i,i)})`, the step-`i` prediction after
/// `i − 1` predicted states; `early[j−1]` is `(p_{n+j}, q^{(1,j)})`, the
/// parallel prediction of offset `j`. Both share the `i = j = 1` term.
#[derive(Clone, Debug)]
pub struct SurrogateFamily {
    pub late: Vec<(Vec<f64>, Vec<f64>)>,
    pub early: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateReport {
    pub k: usize,
    /// `α^{(i)} = E_{p_{n+i}}[q^{(i,i)}]`.
    pub alpha: Vec<f64>,
    /// `Σ (k − i + 1)·CE(p_{n+i}, q^{(i,i)})`.
    pub late_loss: f64,
    /// `−J + k`.
    pub late_bound: f64,
    /// `Σ_j CE(p_{n+j}, q^{(1,j)})`.
    pub early_loss: f64,
    /// `−k·ln α^{(1)}`.
    pub early_bound: f64,
    /// Whether `E_{p_{n+j}}[q^{(1,j)}] ≤ α^{(1)}` for every `j`, the
    /// degradation premise of the early bound.
    pub early_premise: bool,
    pub late_holds: bool,
    pub early_holds: bool,
}

impl SurrogateReport {
    pub fn late_gap(&self) -> f64 {
        self.late_loss - self.late_bound
    }
}

pub fn surrogate_bound_check(family: &SurrogateFamily) -> Result<SurrogateReport> {
    let k = family.late.len();
    if k == 0 || family.early.len() != k {
        return Err(Error::shape("family needs k ≥ 1 late and early pairs"));
    }
    for (p, q) in family.late.iter().chain(&family.early) {
        check_distribution(p, "p")?;
        check_distribution(q, "q")?;
    }
    let mut alpha = Vec::with_capacity(k);
    let mut late_loss = 0.0;
    for (i, (p, q)) in family.late.iter().enumerate() {
        late_loss += (k - i) as f64 * cross_entropy(p, q)?;
        alpha.push(expected_q(p, q));
    }
    let profile = AcceptanceProfile::new(alpha.clone())?;
    let late_bound = -taylor_surrogate_j(&profile)? + k as f64;
    let mut early_loss = 0.0;
    let mut early_premise = true;
    for (p, q) in &family.early {
        early_loss += cross_entropy(p, q)?;
        early_premise &= expected_q(p, q) <= alpha[0] + 1e-12;
    }
    let early_bound = -(k as f64) * alpha[0].ln();
    let tol = 1e-9 * (1.0 + late_loss.abs() + early_loss.abs());
    Ok(SurrogateReport {
        k,
        late_holds: late_loss >= late_bound - tol,
        early_holds: early_loss >= early_bound - tol,
        alpha,
        late_loss,
        late_bound,
        early_loss,
        early_bound,
        early_premise,
    })
}

/// Random probability vector of length `n` with full support.
pub fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Random family over `n` outcomes whose parallel predictions degrade:
/// `E_{p_{n+j}}[q^{(1,j)}] ≤ α^{(1)}` for every `j`.
pub fn degrading_family<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> SurrogateFamily {
    let uniform = 1.0 / n as f64;
    let first = loop {
        let p = random_distribution(n, rng);
        let q = random_distribution(n, rng);
        if expected_q(&p, &q) >= uniform {
            break (p, q);
        }
    };
    let a1 = expected_q(&first.0, &first.1);
    let mut early = vec![first.clone()];
    for _ in 1..k {
        let p = random_distribution(n, rng);
        let mut q = random_distribution(n, rng);
        let a = expected_q(&p, &q);
        if a > a1 {
            let (m, &pmin) = p.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).expect("n ≥ 1");
            let rho = (a - a1) / (a - pmin);
            for v in q.iter_mut() {
                *v *= 1.0 - rho;
            }
            q[m] += rho;
        }
        early.push((p, q));
    }
    let mut late = vec![first];
    for _ in 1..k {
        late.push((random_distribution(n, rng), random_distribution(n, rng)));
    }
    SurrogateFamily { late, early }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn summarize(samples: impl Iterator<Item = f64>) -> McEstimate {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for x in samples {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    let mean = s / n;
    let var = if n > 1.0 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    McEstimate { mean, stderr: (var / n).sqrt() }
}

/// Simulate per-position Bernoulli acceptance and average the accepted
/// prefix length.
pub fn mc_acceptance_oracle(profile: &AcceptanceProfile, trials: usize, seed: u64) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::validation("need at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = profile.alpha();
    Ok(summarize((0..trials).map(|_| alpha.iter().take_while(|&&a| rng.gen::<f64>() < a).count() as f64)))
}

/// Simulate the exact acceptance rule: draw `t ~ q_i`, accept with
/// probability `min(1, p_i(t)/q_i(t))`.
pub fn mc_acceptance_from_pairs(pairs: &[(Vec<f64>, Vec<f64>)], trials: usize, seed: u64) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::validation("need at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut len = 0;
        for (p, q) in pairs {
            let t = sample(q, &mut rng)?;
            if rng.gen::<f64>() < (p[t] / q[t]).min(1.0) {
                len += 1;
            } else {
                break;
            }
        }
        out.push(len as f64);
    }
    Ok(summarize(out.into_iter()))
}

/// Acceptance rate of the exact rule at one position: `Σ_t min(p, q)`.
pub fn exact_acceptance_rate(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum()
}

/// One row of an eval CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub iter: usize,
    pub tau: usize,
    pub draft_us: f64,
    pub verify_us: f64,
    pub mask: Vec<Option<bool>>,
}

const EVAL_COLUMNS: [&str; 5] = ["iter", "tau", "T_d_us", "T_v_us", "accepted_mask"];

/// Parse an eval CSV. Lines starting with `#` and blank lines are skipped.
pub fn read_eval_csv<R: BufRead>(reader: R) -> Result<Vec<EvalRow>> {
    let mut lines = reader.lines().enumerate();
    let mut cols: Option<Vec<usize>> = None;
    let mut rows = Vec::new();
    while let Some((i, line)) = lines.next() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        let Some(idx) = &cols else {
            let mut idx = Vec::with_capacity(EVAL_COLUMNS.len());
            for c in EVAL_COLUMNS {
                let at = fields
                    .iter()
                    .position(|f| *f == c)
                    .ok_or_else(|| Error::Parse { line: lineno, msg: format!("missing column `{c}`") })?;
                idx.push(at);
            }
            cols = Some(idx);
            continue;
        };
        let get = |c: usize| -> Result<&str> {
            fields.get(idx[c]).copied().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("row has no value for column `{}`", EVAL_COLUMNS[c]),
            })
        };
        let num = |c: usize| -> Result<f64> {
            get(c)?.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column `{}` is not a number", EVAL_COLUMNS[c]),
            })
        };
        let int = |c: usize| -> Result<usize> {
            get(c)?.parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column `{}` is not a non-negative integer", EVAL_COLUMNS[c]),
            })
        };
        let mask = get(4)?
            .chars()
            .map(|ch| match ch {
                '1' => Ok(Some(true)),
                '0' => Ok(Some(false)),
                '-' => Ok(None),
                other => Err(Error::Parse { line: lineno, msg: format!("bad mask character `{other}`") }),
            })
            .collect::<Result<Vec<_>>>()?;
        let row = EvalRow { iter: int(0)?, tau: int(1)?, draft_us: num(2)?, verify_us: num(3)?, mask };
        let accepted = row.mask.iter().take_while(|m| **m == Some(true)).count();
        if row.tau != accepted + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("tau {} disagrees with mask `{}`", row.tau, get(4)?),
            });
        }
        rows.push(row);
    }
    if cols.is_none() {
        return Err(Error::Parse { line: 0, msg: "missing header row".into() });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub iterations: usize,
    pub gamma: usize,
    pub alpha: Vec<f64>,
    pub mean_tau: f64,
    /// Tail-sum `E[L]` from the measured rates.
    pub expected_length: f64,
    pub j: Option<f64>,
    pub taylor_bound: Option<f64>,
    pub taylor_holds: Option<bool>,
    pub fitted_r: Option<f64>,
    pub improvement_factor: Option<f64>,
}

pub fn analyze(rows: &[EvalRow]) -> Result<AnalysisReport> {
    if rows.is_empty() {
        return Err(Error::validation("eval log has no iterations"));
    }
    let masks: Vec<Vec<Option<bool>>> = rows.iter().map(|r| r.mask.clone()).collect();
    let profile = alpha_from_masks(&masks)?;
    let expected_length = expected_acceptance_length(&profile);
    let j = taylor_surrogate_j(&profile).ok();
    let taylor_bound = taylor_remainder_bound(&profile).ok();
    let taylor_holds = match (j, taylor_bound) {
        (Some(j), Some(b)) => Some(expected_length - j >= -1e-12 && expected_length - j <= b + 1e-12),
        _ => None,
    };
    let n = rows.len() as f64;
    let mean_tau = rows.iter().map(|r| r.tau as f64).sum::<f64>() / n;
    let td = rows.iter().map(|r| r.draft_us).sum::<f64>() / n;
    let tv = rows.iter().map(|r| r.verify_us).sum::<f64>() / n;
    Ok(AnalysisReport {
        iterations: rows.len(),
        gamma: profile.k(),
        alpha: profile.alpha().to_vec(),
        mean_tau,
        expected_length,
        j,
        taylor_bound,
        taylor_holds,
        fitted_r: fit_geometric_r(&profile),
        improvement_factor: crate::specdec::improvement_from(mean_tau, td, tv).ok(),
    })
}

impl AnalysisReport {
    /// `key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "iterations,{}", self.iterations);
        let _ = writeln!(s, "gamma,{}", self.gamma);
        for (i, a) in self.alpha.iter().enumerate() {
            let _ = writeln!(s, "alpha_{},{a:.6}", i + 1);
        }
        let _ = writeln!(s, "mean_tau,{:.6}", self.mean_tau);
        let _ = writeln!(s, "expected_L,{:.6}", self.expected_length);
        let _ = writeln!(s, "J,{}", opt(self.j));
        let _ = writeln!(s, "taylor_remainder_bound,{}", opt(self.taylor_bound));
        let _ = writeln!(s, "taylor_bound_holds,{}", self.taylor_holds.map_or("NA".into(), |b| b.to_string()));
        let _ = writeln!(s, "fitted_r,{}", opt(self.fitted_r));
        let _ = writeln!(s, "improvement_factor,{}", opt(self.improvement_factor));
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let a: Vec<String> = self.alpha.iter().map(|a| format!("{a:.3}")).collect();
        let _ = writeln!(s, "iterations       {}", self.iterations);
        let _ = writeln!(s, "alpha            [{}]", a.join(", "));
        let _ = writeln!(s, "mean tau         {:.4}", self.mean_tau);
        let _ = writeln!(s, "E[L] (tail sum)  {:.4}  (mean tau - 1 = {:.4})", self.expected_length, self.mean_tau - 1.0);
        match self.j {
            Some(j) => {
                let _ = writeln!(s, "J (Taylor)       {j:.4}");
            }
            None => {
                let _ = writeln!(s, "J (Taylor)       undefined (some alpha is 0)");
            }
        }
        if let Some(r) = self.fitted_r {
            let _ = writeln!(s, "geometric r      {r:.4}");
        }
        if let Some(f) = self.improvement_factor {
            let _ = writeln!(s, "improvement      {f:.4}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prof(a: &[f64]) -> AcceptanceProfile {
        AcceptanceProfile::new(a.to_vec()).unwrap()
    }

    #[test]
    fn tail_sum_examples() {
        assert_eq!(expected_acceptance_length(&prof(&[1.0; 4])), 4.0);
        assert!((expected_acceptance_length(&prof(&[0.8; 3])) - 1.952).abs() < 1e-12);
        assert_eq!(expected_acceptance_length(&prof(&[0.0, 1.0, 1.0])), 0.0);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(taylor_surrogate_j(&prof(&[1.0; 5])).unwrap(), 5.0);
        let j = taylor_surrogate_j(&prof(&[0.8; 3])).unwrap();
        assert!((j - (6.0 * 0.8f64.ln() + 3.0)).abs() < 1e-12);
        assert!((j - 1.6612).abs() < 1e-4);
        let p = prof(&[0.99; 5]);
        assert!((expected_acceptance_length(&p) - taylor_surrogate_j(&p).unwrap()).abs() < 0.01);
        assert!(matches!(taylor_surrogate_j(&prof(&[0.5, 0.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn geometric_examples() {
        let g = geometric_profile(&DegradationModel::new(0.9, 0.8).unwrap(), 3).unwrap();
        for (a, b) in g.alpha().iter().zip([0.9, 0.72, 0.576]) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = geometric_profile(&DegradationModel::new(0.7, 1.0).unwrap(), 4).unwrap();
        assert_eq!(g.alpha(), &[0.7; 4]);
        assert_eq!(geometric_profile(&DegradationModel::new(0.3, 0.5).unwrap(), 1).unwrap().alpha(), &[0.3]);
        assert!((fit_geometric_r(&prof(&[0.9, 0.72, 0.576])).unwrap() - 0.8).abs() < 1e-12);
        assert!(DegradationModel::new(0.5, 0.0).is_err());
    }

    #[test]
    fn jensen_examples() {
        let u = vec![0.25; 4];
        let c = jensen_gap_check(&u, &u).unwrap();
        assert!((c.lhs - 4f64.ln()).abs() < 1e-12 && (c.rhs - 4f64.ln()).abs() < 1e-12 && c.holds);
        let c = jensen_gap_check(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((c.lhs - 1.2040).abs() < 1e-4);
        assert!((c.rhs - 0.6931).abs() < 1e-4);
        assert!(c.holds);
        assert!(matches!(jensen_gap_check(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn identical_distributions_gap_is_entropy_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 3;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .map(|_| {
                let p = random_distribution(6, &mut rng);
                (p.clone(), p)
            })
            .collect();
        let r = surrogate_bound_check(&SurrogateFamily { late: pairs.clone(), early: pairs.clone() }).unwrap();
        let mut expect = 0.0;
        for (i, (p, _)) in pairs.iter().enumerate() {
            let h = cross_entropy(p, p).unwrap();
            expect += (k - i) as f64 * (h + expected_q(p, p).ln());
        }
        assert!((r.late_gap() - expect).abs() < 1e-12);
        assert!(r.late_holds);
    }

    #[test]
    fn single_position_bounds_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = degrading_family(1, 5, &mut rng);
        let r = surrogate_bound_check(&f).unwrap();
        assert!((r.late_bound - r.early_bound).abs() < 1e-12);
        assert!((r.late_loss - r.early_loss).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let e = mc_acceptance_oracle(&prof(&[1.0; 4]), 1000, 0).unwrap();
        assert_eq!((e.mean, e.stderr), (4.0, 0.0));
        let a = mc_acceptance_oracle(&prof(&[0.8; 3]), 10_000, 7).unwrap();
        assert_eq!(a, mc_acceptance_oracle(&prof(&[0.8; 3]), 10_000, 7).unwrap());
    }

    #[test]
    fn exact_rule_oracle_matches_overlap_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..3).map(|_| (random_distribution(4, &mut rng), random_distribution(4, &mut rng))).collect();
        let profile = prof(&pairs.iter().map(|(p, q)| exact_acceptance_rate(p, q)).collect::<Vec<_>>());
        let e = mc_acceptance_from_pairs(&pairs, 100_000, 1).unwrap();
        assert!((e.mean - expected_acceptance_length(&profile)).abs() < 3.0 * e.stderr + 1e-9);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let text = "iter,tau,T_d_us,T_v_us,accepted_mask\n1,3,5.0,10.0,110\n2,1,5.0,10.0,0--\n# alpha=...\n3,4,5,10,111\n";
        let rows = read_eval_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        let rep = analyze(&rows).unwrap();
        assert_eq!(rep.alpha, vec![2.0 / 3.0, 1.0, 0.5]);
        assert!((rep.mean_tau - 1.0 - rep.expected_length).abs() < 1e-12);

        let missing = "iter,tau,T_d_us,accepted_mask\n1,1,2,0\n";
        match read_eval_csv(missing.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("T_v_us"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "iter,tau,T_d_us,T_v_us,accepted_mask\n1,x,2,3,0\n";
        assert!(matches!(read_eval_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn all_accepted_log_gives_gamma() {
        let text = "iter,tau,T_d_us,T_v_us,accepted_mask\n1,5,1,1,1111\n2,5,1,1,1111\n";
        let rep = analyze(&read_eval_csv(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(rep.expected_length, 4.0);
        assert_eq!(rep.j, Some(4.0));
    }
}
