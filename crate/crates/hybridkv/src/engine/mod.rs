//! Decode-replay engine: executes a per-head compression plan against a
//! trace and measures fidelity, fast-tier residency, and slow-tier traffic.
//!
//! Every head attends through the same segmented kernel over its resident
//! prefill rows plus the decode rows appended so far, so a plan that keeps
//! everything reproduces the uncompressed outputs bit for bit.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_segments, default_top_k};
use crate::budget::{BudgetConfig, BudgetPlan};
use crate::classify::{HeadClass, SparsityScores, ThresholdMode};
use crate::error::{Error, Result};
use crate::pruner::prune_static_head;
use crate::retriever::{build_index, score_chunks, select_top_chunks, ChunkIndex, TieredStore};
use crate::trace::{AttentionTrace, TraceHeader};

/// Bytes for `tokens` cached key+value rows of width `d` (f32 storage).
pub fn kv_bytes(tokens: usize, head_dim: usize) -> u64 {
    (tokens * 2 * head_dim * 4) as u64
}

/// Runtime knobs shared by every strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Per-head budget as a fraction of the context: every head-slot is
    /// granted `ceil(budget_ratio * C)` tokens on average.
    pub budget_ratio: f64,
    /// Dynamic share coefficient r.
    pub share_coefficient: f64,
    /// Static blend coefficient alpha.
    pub allocation_ratio: f64,
    /// Tokens per retrieval chunk.
    pub chunk_size: usize,
    /// Static/dynamic score cutoff.
    pub threshold: ThresholdMode,
    /// Top-k width for sparsity scoring; `None` uses ceil(0.05 * C).
    pub top_k: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget_ratio: 0.10,
            share_coefficient: BudgetConfig::DEFAULT_SHARE_COEFFICIENT,
            allocation_ratio: BudgetConfig::DEFAULT_ALLOCATION_RATIO,
            chunk_size: BudgetConfig::DEFAULT_CHUNK_SIZE,
            threshold: ThresholdMode::Absolute(0.9),
            top_k: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_ratio > 0.0 && self.budget_ratio <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "budget ratio {} must lie in (0, 1]",
                self.budget_ratio
            )));
        }
        let cutoff = match self.threshold {
            ThresholdMode::Absolute(t) => t,
            ThresholdMode::Quantile(q) => q,
        };
        if !(cutoff > 0.0 && cutoff < 1.0) {
            return Err(Error::InvalidArg(format!(
                "threshold parameter {cutoff} must lie in (0, 1)"
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArg("top_k must be >= 1".into()));
        }
        // Share coefficient, alpha, and chunk size share the budget
        // validator.
        BudgetConfig {
            total_budget: 1,
            share_coefficient: self.share_coefficient,
            allocation_ratio: self.allocation_ratio,
            chunk_size: self.chunk_size,
        }
        .validate()
    }

    /// Top-k width actually used for sparsity scoring.
    pub fn resolved_top_k(&self, context_len: usize) -> usize {
        self.top_k.unwrap_or_else(|| default_top_k(context_len))
    }

    /// Engine-wide budget: `ceil(budget_ratio * C)` tokens per head-slot.
    pub fn total_budget(&self, header: &TraceHeader) -> usize {
        let per_head = (self.budget_ratio * header.context_len as f64).ceil() as usize;
        per_head.max(1) * header.num_layers * header.num_heads
    }

    pub fn budget_config(&self, header: &TraceHeader) -> BudgetConfig {
        BudgetConfig {
            total_budget: self.total_budget(header),
            share_coefficient: self.share_coefficient,
            allocation_ratio: self.allocation_ratio,
            chunk_size: self.chunk_size,
        }
    }
}

/// Treatment of one head under a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadAssignment {
    /// Prune once after prefill to `budget` tokens; the kept set never moves.
    Static { budget: usize },
    /// Keep a summary index; re-retrieve up to `capacity_chunks` chunks per
    /// decode step.
    Dynamic { capacity_chunks: usize },
    /// Keep the whole cache resident (no compression).
    Full,
}

/// Fully resolved plan: one assignment per head, `layer * heads + head`
/// order, plus the planning artifacts that produced it (when they exist).
#[derive(Debug, Clone)]
pub struct EnginePlan {
    pub strategy: &'static str,
    pub chunk_size: usize,
    pub assignments: Vec<HeadAssignment>,
    pub scores: Option<SparsityScores>,
    pub classes: Option<HeadClass>,
    pub budget: Option<BudgetPlan>,
}

impl EnginePlan {
    fn validate(&self, header: &TraceHeader) -> Result<()> {
        let slots = header.num_layers * header.num_heads;
        if self.assignments.len() != slots {
            return Err(Error::Shape(format!(
                "plan holds {} assignments for {slots} heads",
                self.assignments.len()
            )));
        }
        for (i, a) in self.assignments.iter().enumerate() {
            match a {
                HeadAssignment::Static { budget: 0 } => {
                    return Err(Error::InvalidArg(format!(
                        "head slot {i}: static budget must be >= 1"
                    )));
                }
                HeadAssignment::Dynamic { capacity_chunks: 0 } => {
                    return Err(Error::InvalidArg(format!(
                        "head slot {i}: chunk capacity must be >= 1"
                    )));
                }
                _ => {}
            }
        }
        if self.chunk_size == 0
            && self
                .assignments
                .iter()
                .any(|a| matches!(a, HeadAssignment::Dynamic { .. }))
        {
            return Err(Error::InvalidArg("chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Measured outcome of one decode replay.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineRun {
    /// Attention outputs, `[decode_steps, layers, heads, head_dim]`.
    pub outputs: Vec<f32>,
    pub decode_steps: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub n_full: usize,
    /// Bytes of an uncompressed prefill cache: `L * H * C * 2 * d * 4`.
    pub full_cache_bytes: u64,
    /// Peak bytes of prefill-origin KV resident in the fast tier across the
    /// replay (decode-appended rows and index metadata are reported
    /// separately).
    pub fast_tier_peak_bytes: u64,
    /// Total bytes moved from the slow tier by dynamic retrieval.
    pub transfer_bytes: u64,
    /// Bytes of chunk-summary metadata held for dynamic heads.
    pub index_metadata_bytes: u64,
    /// Bytes of decode-appended KV after the full replay.
    pub appended_kv_bytes: u64,
}

enum ModeState {
    Static {
        keys: Vec<f32>,
        values: Vec<f32>,
        tokens: usize,
    },
    Dynamic {
        index: ChunkIndex,
        store: TieredStore,
        capacity: usize,
    },
    Full,
}

struct HeadState {
    layer: usize,
    head: usize,
    mode: ModeState,
    appended_k: Vec<f32>,
    appended_v: Vec<f32>,
}

impl HeadState {
    fn resident_bytes(&self, context_len: usize, head_dim: usize) -> u64 {
        match &self.mode {
            ModeState::Static { tokens, .. } => kv_bytes(*tokens, head_dim),
            ModeState::Dynamic { store, .. } => kv_bytes(store.resident_tokens(), head_dim),
            ModeState::Full => kv_bytes(context_len, head_dim),
        }
    }

    /// One decode step: append this step's KV, refresh retrieval if dynamic,
    /// attend, and report resident prefill-origin bytes.
    fn step(&mut self, trace: &AttentionTrace, step: usize, out: &mut [f32]) -> Result<u64> {
        let (l, h) = (self.layer, self.head);
        let d = trace.header.head_dim;
        self.appended_k.extend_from_slice(trace.decode_k_row(step, l, h));
        self.appended_v.extend_from_slice(trace.decode_v_row(step, l, h));
        let q = trace.decode_q_row(step, l, h);
        let appended = (&self.appended_k[..], &self.appended_v[..]);
        match &mut self.mode {
            ModeState::Static { keys, values, tokens } => {
                attend_segments(q, &[(keys, values), appended], d, out)?;
                Ok(kv_bytes(*tokens, d))
            }
            ModeState::Dynamic { index, store, capacity } => {
                let scores = score_chunks(index, q)?;
                let chosen = select_top_chunks(&scores, *capacity);
                store.set_resident(&chosen)?;
                let (_, keys, values) = store.gather();
                attend_segments(q, &[(&keys, &values), appended], d, out)?;
                Ok(kv_bytes(store.resident_tokens(), d))
            }
            ModeState::Full => {
                let keys = trace.prefill_k_head(l, h);
                let values = trace.prefill_v_head(l, h);
                attend_segments(q, &[(keys, values), appended], d, out)?;
                Ok(kv_bytes(trace.header.context_len, d))
            }
        }
    }
}

/// Copy the key/value rows at `positions` (ascending) out of one head's
/// prefill cache, bit for bit.
fn gather_positions(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    positions: &[usize],
) -> (Vec<f32>, Vec<f32>) {
    let d = trace.header.head_dim;
    let keys_src = trace.prefill_k_head(layer, head);
    let values_src = trace.prefill_v_head(layer, head);
    let mut keys = Vec::with_capacity(positions.len() * d);
    let mut values = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        keys.extend_from_slice(&keys_src[p * d..(p + 1) * d]);
        values.extend_from_slice(&values_src[p * d..(p + 1) * d]);
    }
    (keys, values)
}

/// Replay every decode step of `trace` under `plan`.
pub fn run(trace: &AttentionTrace, plan: &EnginePlan) -> Result<EngineRun> {
    let header = &trace.header;
    plan.validate(header)?;
    let (layers, heads, d) = (header.num_layers, header.num_heads, header.head_dim);
    let (c, n) = (header.context_len, header.decode_steps);

    // Prefill: resolve each head's resident state in parallel.
    let mut states: Vec<HeadState> = (0..layers * heads)
        .into_par_iter()
        .map(|slot| {
            let (layer, head) = (slot / heads, slot % heads);
            let mode = match &plan.assignments[slot] {
                HeadAssignment::Static { budget } => {
                    let pruned = prune_static_head(trace, layer, head, *budget)?;
                    let (keys, values) = gather_positions(trace, layer, head, &pruned.kept);
                    ModeState::Static { keys, values, tokens: pruned.kept.len() }
                }
                HeadAssignment::Dynamic { capacity_chunks } => {
                    let keys = trace.prefill_k_head(layer, head);
                    let values = trace.prefill_v_head(layer, head);
                    let index = build_index(keys, c, d, plan.chunk_size)?;
                    let capacity = (*capacity_chunks).min(index.num_chunks());
                    let store = TieredStore::new(
                        keys.to_vec(),
                        values.to_vec(),
                        c,
                        d,
                        plan.chunk_size,
                    )?;
                    ModeState::Dynamic { index, store, capacity }
                }
                HeadAssignment::Full => ModeState::Full,
            };
            Ok(HeadState {
                layer,
                head,
                mode,
                appended_k: Vec::with_capacity(n * d),
                appended_v: Vec::with_capacity(n * d),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut peak: u64 = states.iter().map(|s| s.resident_bytes(c, d)).sum();
    let mut outputs = vec![0.0f32; n * layers * heads * d];
    let row = layers * heads * d;
    for step in 0..n {
        let step_out = &mut outputs[step * row..(step + 1) * row];
        let resident: u64 = states
            .par_iter_mut()
            .zip(step_out.par_chunks_mut(d))
            .map(|(state, out)| state.step(trace, step, out))
            .collect::<Result<Vec<u64>>>()?
            .iter()
            .sum();
        peak = peak.max(resident);
    }

    let mut n_static = 0;
    let mut n_dynamic = 0;
    let mut n_full = 0;
    let mut transfer = 0u64;
    let mut metadata = 0u64;
    for state in &states {
        match &state.mode {
            ModeState::Static { .. } => n_static += 1,
            ModeState::Dynamic { index, store, .. } => {
                n_dynamic += 1;
                transfer += store.transfer_bytes();
                metadata += index.metadata_bytes();
            }
            ModeState::Full => n_full += 1,
        }
    }
    Ok(EngineRun {
        outputs,
        decode_steps: n,
        num_layers: layers,
        num_heads: heads,
        head_dim: d,
        n_static,
        n_dynamic,
        n_full,
        full_cache_bytes: kv_bytes(c, d) * (layers * heads) as u64,
        fast_tier_peak_bytes: peak,
        transfer_bytes: transfer,
        index_metadata_bytes: metadata,
        appended_kv_bytes: kv_bytes(n, d) * (layers * heads) as u64,
    })
}

/// Cosine similarity in f64; identical slices (zero vectors included) score
/// exactly 1, a lone zero vector scores 0, everything else is clamped to
/// `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Euclidean distance between two output rows, accumulated in f64.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let diff = x as f64 - y as f64;
        sum += diff * diff;
    }
    sum.sqrt()
}

/// Mean/min cosine and mean L2 distance over one group of output rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub mean: f64,
    pub min: f64,
    pub mean_l2: f64,
}

#[derive(Default)]
struct FidelityAccum {
    cos_sum: f64,
    cos_min: f64,
    l2_sum: f64,
    rows: usize,
}

impl FidelityAccum {
    fn new() -> Self {
        FidelityAccum { cos_min: f64::INFINITY, ..Default::default() }
    }

    fn add(&mut self, cos: f64, l2: f64) {
        self.cos_sum += cos;
        self.cos_min = self.cos_min.min(cos);
        self.l2_sum += l2;
        self.rows += 1;
    }

    fn summary(&self) -> FidelitySummary {
        FidelitySummary {
            mean: self.cos_sum / self.rows as f64,
            min: self.cos_min,
            mean_l2: self.l2_sum / self.rows as f64,
        }
    }
}

/// Output fidelity over all decode rows, aggregate and split by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityStats {
    pub overall: FidelitySummary,
    /// One summary per layer, index = layer.
    pub per_layer: Vec<FidelitySummary>,
}

/// Per-row cosine and L2 distance between two runs' outputs, aggregated over
/// every `(step, layer, head)` row and per layer. `None` when there were no
/// decode steps.
pub fn fidelity_stats(reference: &EngineRun, candidate: &EngineRun) -> Result<Option<FidelityStats>> {
    if reference.outputs.len() != candidate.outputs.len()
        || reference.head_dim != candidate.head_dim
        || reference.num_layers != candidate.num_layers
        || reference.num_heads != candidate.num_heads
    {
        return Err(Error::Shape(format!(
            "cannot compare outputs of {} and {} floats",
            reference.outputs.len(),
            candidate.outputs.len()
        )));
    }
    if reference.decode_steps == 0 {
        return Ok(None);
    }
    let d = reference.head_dim;
    let (layers, heads) = (reference.num_layers, reference.num_heads);
    let mut overall = FidelityAccum::new();
    let mut by_layer: Vec<FidelityAccum> = (0..layers).map(|_| FidelityAccum::new()).collect();
    for (row, (a, b)) in reference
        .outputs
        .chunks_exact(d)
        .zip(candidate.outputs.chunks_exact(d))
        .enumerate()
    {
        let layer = (row / heads) % layers;
        let c = cosine(a, b);
        let l2 = l2_distance(a, b);
        overall.add(c, l2);
        by_layer[layer].add(c, l2);
    }
    Ok(Some(FidelityStats {
        overall: overall.summary(),
        per_layer: by_layer.iter().map(FidelityAccum::summary).collect(),
    }))
}
