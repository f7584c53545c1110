//! Attention masks and window plans for draft-head training.
//!
//! Positions are 1-based throughout. A query at position `i` may only see
//! key positions `j < i`. Simulation masks carry a second key segment of
//! predicted-state slots: slot `j` holds the draft's own prediction for
//! position `j` and obeys the same strict causality.

use std::cell::Cell;
use std::fmt::Write as _;

use crate::error::{Error, Result};

thread_local! {
    static AUX_ALLOCATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Allocation counter for simulation buffers (masks and key-state arrays).
///
/// Counts are per thread, so concurrently running tests do not interfere.
pub mod alloc_counter {
    use super::AUX_ALLOCATIONS;

    pub fn count() -> usize {
        AUX_ALLOCATIONS.with(|c| c.get())
    }

    pub fn reset() {
        AUX_ALLOCATIONS.with(|c| c.set(0));
    }

    pub(crate) fn bump() {
        AUX_ALLOCATIONS.with(|c| c.set(c.get() + 1));
    }
}

/// Dense boolean query × key admissibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    with_slots: bool,
    allowed: Vec<bool>,
}

impl AttentionMask {
    fn empty(len: usize, with_slots: bool) -> Self {
        alloc_counter::bump();
        let keys = if with_slots { 2 * len } else { len };
        Self { len, with_slots, allowed: vec![false; len * keys] }
    }

    /// Number of query (and true-state key) positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_slots(&self) -> bool {
        self.with_slots
    }

    /// Key columns per row: `T`, or `2T` with slots.
    pub fn key_count(&self) -> usize {
        if self.with_slots {
            2 * self.len
        } else {
            self.len
        }
    }

    /// Row-major `T × key_count` view.
    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Whether query `i` sees the true state at `j` (1-based).
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[(i - 1) * self.key_count() + (j - 1)]
    }

    /// Whether query `i` sees the predicted-state slot for position `j`.
    pub fn slot_allowed(&self, i: usize, j: usize) -> bool {
        self.with_slots && self.allowed[(i - 1) * self.key_count() + self.len + (j - 1)]
    }

    fn set(&mut self, i: usize, j: usize) {
        debug_assert!(j < i);
        let kc = self.key_count();
        self.allowed[(i - 1) * kc + (j - 1)] = true;
    }

    fn set_slot(&mut self, i: usize, j: usize) {
        debug_assert!(j < i);
        let kc = self.key_count();
        self.allowed[(i - 1) * kc + self.len + (j - 1)] = true;
    }

    /// Visible true-state keys of query `i`.
    pub fn row_keys(&self, i: usize) -> Vec<usize> {
        (1..=self.len).filter(|&j| self.allowed(i, j)).collect()
    }

    pub fn row_slots(&self, i: usize) -> Vec<usize> {
        (1..=self.len).filter(|&j| self.slot_allowed(i, j)).collect()
    }

    /// True when every admitted entry satisfies `j < i`.
    pub fn is_strictly_causal(&self) -> bool {
        (1..=self.len).all(|i| {
            (1..=self.len).all(|j| j < i || (!self.allowed(i, j) && !self.slot_allowed(i, j)))
        })
    }

    /// `self ⊇ other` entrywise.
    pub fn contains(&self, other: &AttentionMask) -> bool {
        self.len == other.len
            && (1..=self.len).all(|i| {
                (1..=self.len).all(|j| {
                    (!other.allowed(i, j) || self.allowed(i, j))
                        && (!other.slot_allowed(i, j) || self.slot_allowed(i, j))
                })
            })
    }

    /// ASCII grid, one row per query: `x` allowed, `.` masked. With slots
    /// the slot block follows the true-state block after a space.
    pub fn to_ascii(&self, include_slots: bool) -> String {
        let mut s = String::new();
        for i in 1..=self.len {
            for j in 1..=self.len {
                s.push(if self.allowed(i, j) { 'x' } else { '.' });
            }
            if include_slots && self.with_slots {
                s.push(' ');
                for j in 1..=self.len {
                    s.push(if self.slot_allowed(i, j) { 'x' } else { '.' });
                }
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// One window of queries `start+1 ..= end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start + 1..=self.end
    }

    /// Query at offset `i` (1-based) if the window reaches it.
    pub fn query(&self, i: usize) -> Option<usize> {
        (i >= 1 && self.start + i <= self.end).then_some(self.start + i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub len: usize,
    pub k: usize,
    pub offset: usize,
    pub windows: Vec<Window>,
}

impl WindowPlan {
    /// Window containing query `i`.
    pub fn window_of(&self, i: usize) -> &Window {
        let idx = self.windows.partition_point(|w| w.end < i);
        &self.windows[idx]
    }
}

/// `allowed(i, j) ⇔ j < i`.
pub fn strict_causal_mask(len: usize) -> AttentionMask {
    let mut m = AttentionMask::empty(len, false);
    for i in 1..=len {
        for j in 1..i {
            m.set(i, j);
        }
    }
    m
}

/// Windows of size `k` starting at `offset`, `offset + k`, …; a leading
/// window from 0 covers `1..=offset` when `offset > 0`, and the final
/// window is truncated at `len`.
pub fn window_plan(len: usize, k: usize, offset: usize) -> Result<WindowPlan> {
    if k == 0 {
        return Err(Error::validation("window size must be at least 1"));
    }
    if offset >= k {
        return Err(Error::validation(format!("offset {offset} must be below window size {k}")));
    }
    let mut windows = Vec::new();
    if offset > 0 && len > 0 {
        windows.push(Window { start: 0, end: offset.min(len) });
    }
    let mut start = offset;
    while start < len {
        windows.push(Window { start, end: (start + k).min(len) });
        start += k;
    }
    Ok(WindowPlan { len, k, offset, windows })
}

fn fill_inverse_block(mask: &mut AttentionMask, plan: &WindowPlan) {
    for w in &plan.windows {
        for i in w.positions() {
            for j in 1..=w.start {
                mask.set(i, j);
            }
        }
    }
}

/// Early-stage mask: each query sees only states at or before the start of
/// its own window.
pub fn inverse_block_mask(plan: &WindowPlan) -> AttentionMask {
    let mut m = AttentionMask::empty(plan.len, false);
    fill_inverse_block(&mut m, plan);
    m
}

/// Step-1 simulation mask: the inverse block mask plus an (initially
/// empty) slot segment that later steps open in place.
pub fn simulation_mask(plan: &WindowPlan) -> AttentionMask {
    let mut m = AttentionMask::empty(plan.len, true);
    fill_inverse_block(&mut m, plan);
    m
}

/// Advance a simulation mask from step `step - 1` to `step`: in each window
/// the query at offset `step` additionally sees the slots of offsets
/// `1..step`.
pub fn simulation_mask_step(mask: &mut AttentionMask, plan: &WindowPlan, step: usize) -> Result<()> {
    open_slots(mask, plan, step, step)
}

/// Like [`simulation_mask_step`], but every query at offsets
/// `step..=lookahead` sees the slots of offsets `1..step`.
pub fn lookahead_mask_step(mask: &mut AttentionMask, plan: &WindowPlan, step: usize, lookahead: usize) -> Result<()> {
    if lookahead < step || lookahead > plan.k {
        return Err(Error::validation(format!("lookahead {lookahead} outside [{step}, {}]", plan.k)));
    }
    open_slots(mask, plan, step, lookahead)
}

fn open_slots(mask: &mut AttentionMask, plan: &WindowPlan, step: usize, last: usize) -> Result<()> {
    if step < 2 || step > plan.k {
        return Err(Error::validation(format!("simulation step {step} outside [2, {}]", plan.k)));
    }
    if !mask.has_slots() || mask.len() != plan.len {
        return Err(Error::validation("mask was not built for this simulation plan"));
    }
    for w in &plan.windows {
        for off in step..=last {
            let Some(i) = w.query(off) else { break };
            for slot in w.start + 1..w.start + step {
                mask.set_slot(i, slot);
            }
        }
    }
    Ok(())
}
