//! Set-builder oracles for the training masks.

use beagle::masks::{inverse_block_mask, simulation_mask, simulation_mask_step, window_plan, AttentionMask};

/// Start of the window holding query `i`, from the offset arithmetic alone.
pub fn start_of(i: usize, k: usize, eps: usize) -> usize {
    if i <= eps {
        0
    } else {
        eps + k * ((i - eps - 1) / k)
    }
}

pub fn real_oracle(i: usize, j: usize, k: usize, eps: usize) -> bool {
    let s = start_of(i, k, eps);
    j < i && !(j > s && j <= s + k)
}

/// Slot `m` is open for query `i` once `step ≥ i − start` and `m` lies
/// strictly between the window start and `i`.
pub fn slot_oracle(i: usize, m: usize, k: usize, eps: usize, step: usize) -> bool {
    let s = start_of(i, k, eps);
    let off = i - s;
    (2..=step).contains(&off) && m > s && m < i
}

/// First disagreement between `mask` and the oracles, if any.
pub fn mismatch(mask: &AttentionMask, t: usize, k: usize, eps: usize, step: usize) -> Option<String> {
    for i in 1..=t {
        for j in 1..=t {
            if mask.allowed(i, j) != real_oracle(i, j, k, eps) {
                return Some(format!("T={t} k={k} ε={eps} step={step} ({i},{j})"));
            }
            if mask.has_slots() && mask.slot_allowed(i, j) != slot_oracle(i, j, k, eps, step) {
                return Some(format!("slot T={t} k={k} ε={eps} step={step} ({i},{j})"));
            }
        }
    }
    None
}

/// Compare every mask for `T ≤ max_t`, `k ≤ max_k`, `ε < k` and every step.
/// Returns the number of masks checked.
pub fn exhaustive(max_t: usize, max_k: usize) -> Result<usize, String> {
    let mut checked = 0;
    for t in 1..=max_t {
        for k in 1..=max_k {
            for eps in 0..k {
                let plan = window_plan(t, k, eps).map_err(|e| e.to_string())?;
                if plan.windows.iter().map(|w| w.len()).sum::<usize>() != t {
                    return Err(format!("windows of T={t} k={k} ε={eps} do not tile"));
                }
                if let Some(e) = mismatch(&inverse_block_mask(&plan), t, k, eps, 1) {
                    return Err(e);
                }
                let mut m = simulation_mask(&plan);
                if let Some(e) = mismatch(&m, t, k, eps, 1) {
                    return Err(e);
                }
                checked += 2;
                for step in 2..=k {
                    let before = m.clone();
                    simulation_mask_step(&mut m, &plan, step).map_err(|e| e.to_string())?;
                    if !m.contains(&before) {
                        return Err(format!("step {step} closed an entry for T={t} k={k} ε={eps}"));
                    }
                    if let Some(e) = mismatch(&m, t, k, eps, step) {
                        return Err(e);
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}
