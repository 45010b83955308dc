//! Top-down budget allocation: split the global token budget between the
//! static and dynamic head populations, then distribute each share per head.
//!
//! Planning happens per layer with that layer's static/dynamic counts; the
//! nominal shares conserve the layer budget exactly, while per-head ceilings
//! (and the one-token/one-chunk floors) may add bounded slack on top, which
//! the plan records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classify::{HeadClass, HeadLabel};
use crate::error::{Error, Result};

/// Tolerance for testing `r` against its feasibility bound so exact boundary
/// values survive floating-point evaluation.
const R_BOUND_EPS: f64 = 1e-9;

/// Knobs for one planning pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Engine-wide token budget B_total (shared evenly across layers).
    pub total_budget: usize,
    /// Dynamic share coefficient r > 0: dynamic heads get r times the mean
    /// per-head budget each, rounded up in aggregate.
    pub share_coefficient: f64,
    /// Static blend coefficient alpha in (0, 1): fraction of the static
    /// share spread uniformly, remainder proportional to normalized scores.
    pub allocation_ratio: f64,
    /// Tokens per retrieval chunk.
    pub chunk_size: usize,
}

impl BudgetConfig {
    pub const DEFAULT_SHARE_COEFFICIENT: f64 = 0.75;
    pub const DEFAULT_ALLOCATION_RATIO: f64 = 0.5;
    pub const DEFAULT_CHUNK_SIZE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.share_coefficient <= 0.0 || !self.share_coefficient.is_finite() {
            return Err(Error::InvalidArg(format!(
                "share coefficient r = {} must be positive",
                self.share_coefficient
            )));
        }
        if !(self.allocation_ratio > 0.0 && self.allocation_ratio < 1.0) {
            return Err(Error::InvalidArg(format!(
                "allocation ratio alpha = {} must lie in (0, 1)",
                self.allocation_ratio
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidArg("chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one planning pass over every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Engine-wide nominal budget (sum of per-layer budgets).
    pub total_budget: usize,
    /// Nominal static share, summed over layers. `b_stat + b_dyna == total_budget`.
    pub b_stat: usize,
    /// Nominal dynamic share, summed over layers.
    pub b_dyna: usize,
    /// Mean per-head budget B_total / (L * H).
    pub mean_budget: f64,
    /// Static heads' token budgets (keyed by `(layer, head)`); each >= 1.
    pub per_head_static: BTreeMap<(usize, usize), usize>,
    /// Dynamic heads' chunk capacities; each a power of two >= 1. Uniform
    /// within a layer, but may differ across layers when the static/dynamic
    /// mix does.
    pub per_head_dynamic_chunks: BTreeMap<(usize, usize), usize>,
    /// Sum of the per-head static ceilings (>= b_stat, excess <= head count).
    pub static_actual_tokens: usize,
    /// Sum of per-head chunk capacities times chunk_size.
    pub dynamic_capacity_tokens: usize,
    /// Set when a dynamic population received a zero nominal share and was
    /// floored to one chunk per head.
    pub zero_capacity_warning: bool,
}

/// Split one layer's budget between its static and dynamic populations.
///
/// The mean per-head budget is `mean = b_total / (n_static + n_dynamic)`;
/// dynamic heads get `b_dyna = ceil(r * mean * n_dynamic)` in aggregate and
/// static heads the remainder. Requires `r * mean * n_dynamic <= b_total`.
/// Returns `(b_stat, b_dyna, mean)`.
pub fn split_by_type(
    b_total: usize,
    n_static: usize,
    n_dynamic: usize,
    r: f64,
) -> Result<(usize, usize, f64)> {
    let heads = n_static + n_dynamic;
    if heads == 0 {
        return Err(Error::InvalidArg("cannot split a budget over zero heads".into()));
    }
    if b_total < heads {
        return Err(Error::InvalidArg(format!(
            "budget {b_total} cannot give each of {heads} heads at least one token"
        )));
    }
    if r <= 0.0 || !r.is_finite() {
        return Err(Error::InvalidArg(format!("share coefficient r = {r} must be positive")));
    }
    let mean = b_total as f64 / heads as f64;
    if n_dynamic == 0 {
        return Ok((b_total, 0, mean));
    }
    // Multiply before dividing so integer-valued shares stay exact (e.g.
    // r = 1 with symmetric populations must land on b_total / 2, not a hair
    // above it).
    let raw = r * b_total as f64 * n_dynamic as f64 / heads as f64;
    let max_r = b_total as f64 / (mean * n_dynamic as f64);
    if raw > b_total as f64 * (1.0 + R_BOUND_EPS) {
        return Err(Error::ShareOutOfRange { r, max: max_r });
    }
    let b_dyna = (raw.ceil() as usize).min(b_total);
    Ok((b_total - b_dyna, b_dyna, mean))
}

/// Distribute the static share across static heads: each head gets
/// `ceil(alpha * b_stat / n + (1 - alpha) * b_stat * score_norm)` tokens,
/// where scores are L1-normalized over the static population. Every head
/// receives at least one token.
pub fn allocate_static(
    b_stat: usize,
    scores: &[((usize, usize), f64)],
    alpha: f64,
) -> Result<BTreeMap<(usize, usize), usize>> {
    if scores.is_empty() {
        if b_stat > 0 {
            return Err(Error::InvalidArg(
                "cannot allocate a positive static share to an empty static set".into(),
            ));
        }
        return Ok(BTreeMap::new());
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArg(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let mut norm = 0.0f64;
    for &(key, s) in scores {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "head {key:?} has non-positive sparsity score {s}"
            )));
        }
        norm += s;
    }
    let n = scores.len() as f64;
    let base = alpha * b_stat as f64 / n;
    let mut out = BTreeMap::new();
    for &(key, s) in scores {
        let share = base + (1.0 - alpha) * b_stat as f64 * (s / norm);
        out.insert(key, (share.ceil() as usize).max(1));
    }
    Ok(out)
}

/// Chunk capacity per dynamic head: the per-head token share rounded up to
/// whole chunks, then up to the next power of two, floored at one chunk.
/// Returns `(chunks_per_head, zero_share_floored)`.
pub fn allocate_dynamic(b_dyna: usize, n_dynamic: usize, chunk_size: usize) -> Result<(usize, bool)> {
    if n_dynamic == 0 {
        return Err(Error::InvalidArg(
            "cannot size chunk capacity for zero dynamic heads".into(),
        ));
    }
    if chunk_size == 0 {
        return Err(Error::InvalidArg("chunk_size must be >= 1".into()));
    }
    if b_dyna == 0 {
        return Ok((1, true));
    }
    let tokens_per_head = b_dyna as f64 / n_dynamic as f64;
    let chunks = (tokens_per_head / chunk_size as f64).ceil() as usize;
    Ok((chunks.max(1).next_power_of_two(), false))
}

/// Plan every layer: classify counts, split, and distribute. Layers are
/// planned independently with an even slice of the engine-wide budget.
pub fn build_plan(
    config: &BudgetConfig,
    classes: &HeadClass,
    scores: &crate::classify::SparsityScores,
) -> Result<BudgetPlan> {
    config.validate()?;
    let (layers, heads) = (classes.layers, classes.heads);
    if scores.layers != layers || scores.heads != heads {
        return Err(Error::Shape(format!(
            "classification is {layers}x{heads} but scores are {}x{}",
            scores.layers, scores.heads
        )));
    }
    let total_heads = layers * heads;
    if config.total_budget < total_heads {
        return Err(Error::InvalidArg(format!(
            "budget {} cannot give each of {total_heads} heads at least one token",
            config.total_budget
        )));
    }

    let per_layer = config.total_budget / layers;
    let remainder = config.total_budget % layers;
    let mut plan = BudgetPlan {
        total_budget: config.total_budget,
        b_stat: 0,
        b_dyna: 0,
        mean_budget: config.total_budget as f64 / total_heads as f64,
        per_head_static: BTreeMap::new(),
        per_head_dynamic_chunks: BTreeMap::new(),
        static_actual_tokens: 0,
        dynamic_capacity_tokens: 0,
        zero_capacity_warning: false,
    };

    for layer in 0..layers {
        let layer_budget = per_layer + usize::from(layer < remainder);
        let (n_stat, n_dyna) = classes.layer_counts(layer);
        // Degenerate populations bypass the split: the whole slice goes to
        // whichever population exists.
        let (b_stat, b_dyna) = if n_dyna == 0 {
            (layer_budget, 0)
        } else if n_stat == 0 {
            (0, layer_budget)
        } else {
            let (s, d, _) = split_by_type(layer_budget, n_stat, n_dyna, config.share_coefficient)?;
            (s, d)
        };
        plan.b_stat += b_stat;
        plan.b_dyna += b_dyna;

        if n_stat > 0 {
            let static_scores: Vec<((usize, usize), f64)> = (0..heads)
                .filter(|&h| classes.get(layer, h) == HeadLabel::Static)
                .map(|h| ((layer, h), scores.get(layer, h)))
                .collect();
            let alloc = allocate_static(b_stat, &static_scores, config.allocation_ratio)?;
            for (key, b) in alloc {
                plan.static_actual_tokens += b;
                plan.per_head_static.insert(key, b);
            }
        }
        if n_dyna > 0 {
            let (chunks, floored) = allocate_dynamic(b_dyna, n_dyna, config.chunk_size)?;
            plan.zero_capacity_warning |= floored;
            for h in 0..heads {
                if classes.get(layer, h) == HeadLabel::Dynamic {
                    plan.per_head_dynamic_chunks.insert((layer, h), chunks);
                    plan.dynamic_capacity_tokens += chunks * config.chunk_size;
                }
            }
        }
    }
    Ok(plan)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Nominal conservation: the two shares always rebuild the budget.
        #[test]
        fn split_conserves_budget(
            heads_static in 0usize..40,
            heads_dynamic in 0usize..40,
            budget_per_head in 1usize..200,
            r_frac in 0.01f64..1.0,
        ) {
            let n = heads_static + heads_dynamic;
            prop_assume!(n > 0);
            let b_total = n * budget_per_head;
            // Scale r into its feasible range (0, B/(mean*n_dyna)].
            let r = if heads_dynamic == 0 {
                0.75
            } else {
                r_frac * n as f64 / heads_dynamic as f64
            };
            let (b_stat, b_dyna, mean) =
                split_by_type(b_total, heads_static, heads_dynamic, r).unwrap();
            prop_assert_eq!(b_stat + b_dyna, b_total);
            prop_assert!((mean - b_total as f64 / n as f64).abs() < 1e-9);
        }

        /// Raising r never shrinks the dynamic share.
        #[test]
        fn dynamic_share_is_monotone_in_r(
            heads_static in 1usize..20,
            heads_dynamic in 1usize..20,
            budget_per_head in 1usize..100,
            r_lo in 0.05f64..0.5,
            r_hi_frac in 0.0f64..1.0,
        ) {
            let n = heads_static + heads_dynamic;
            let b_total = n * budget_per_head;
            let r_max = n as f64 / heads_dynamic as f64;
            let r_lo = r_lo.min(r_max);
            let r_hi = r_lo + r_hi_frac * (r_max - r_lo);
            let (_, d_lo, _) = split_by_type(b_total, heads_static, heads_dynamic, r_lo).unwrap();
            let (_, d_hi, _) = split_by_type(b_total, heads_static, heads_dynamic, r_hi).unwrap();
            prop_assert!(d_hi >= d_lo);
        }

        /// Symmetric populations at r = 1 split within one token.
        #[test]
        fn symmetric_split_at_r_one(heads in 1usize..30, budget in 1usize..500) {
            let b_total = (2 * heads).max(budget);
            let (b_stat, b_dyna, _) = split_by_type(b_total, heads, heads, 1.0).unwrap();
            prop_assert!(b_stat.abs_diff(b_dyna) <= 1);
        }

        /// Static ceilings overshoot the nominal share by at most one token
        /// per head, and every head gets at least one token.
        #[test]
        fn static_ceiling_slack_is_bounded(
            b_stat in 0usize..5000,
            raw_scores in proptest::collection::vec(0.001f64..1.0, 1..32),
            alpha in 0.01f64..0.99,
        ) {
            let scores: Vec<((usize, usize), f64)> = raw_scores
                .iter()
                .enumerate()
                .map(|(h, &s)| ((0usize, h), s))
                .collect();
            let n = scores.len();
            let alloc = allocate_static(b_stat, &scores, alpha).unwrap();
            let total: usize = alloc.values().sum();
            prop_assert!(total >= b_stat.max(n));
            prop_assert!(total <= b_stat + n, "total {} b_stat {} n {}", total, b_stat, n);
            prop_assert!(alloc.values().all(|&b| b >= 1));
        }

        /// Shifting normalized score mass onto a head never shrinks its budget.
        #[test]
        fn score_transfer_is_monotone(
            b_stat in 10usize..2000,
            alpha in 0.01f64..0.99,
            gain in 1usize..6,
            lose in 6usize..12,
            shift in 0.0f64..0.05,
        ) {
            let mut scores: Vec<((usize, usize), f64)> =
                (0..12).map(|h| ((0usize, h), 1.0 / 12.0)).collect();
            let before = allocate_static(b_stat, &scores, alpha).unwrap();
            let shift = shift.min(scores[lose].1 - 1e-6);
            scores[gain].1 += shift;
            scores[lose].1 -= shift;
            let after = allocate_static(b_stat, &scores, alpha).unwrap();
            prop_assert!(after[&(0, gain)] >= before[&(0, gain)]);
        }

        /// Chunk capacities are always powers of two >= 1.
        #[test]
        fn chunk_capacity_is_a_power_of_two(
            b_dyna in 0usize..100_000,
            n_dynamic in 1usize..64,
            chunk_size in 1usize..64,
        ) {
            let (chunks, _) = allocate_dynamic(b_dyna, n_dynamic, chunk_size).unwrap();
            prop_assert!(chunks >= 1);
            prop_assert!(chunks.is_power_of_two());
            // Capacity covers the nominal per-head share.
            prop_assert!(chunks * chunk_size * n_dynamic + n_dynamic * chunk_size > b_dyna);
        }
    }
}
