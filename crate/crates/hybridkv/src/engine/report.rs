//! Flat, serializable summary of one replay: configuration echo, head
//! census, budget figures, memory/traffic measurements, and fidelity against
//! the uncompressed reference. Rendering is deterministic so identical runs
//! produce byte-identical reports.

use serde::{Deserialize, Serialize};

use crate::classify::ThresholdMode;
use crate::engine::{EngineConfig, EnginePlan, EngineRun, FidelityStats, HeadAssignment};
use crate::trace::TraceHeader;

/// Fidelity of one layer's output rows (JSON only; the CSV row carries the
/// aggregate columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFidelity {
    pub layer: usize,
    pub mean_fidelity: f64,
    pub min_fidelity: f64,
    pub mean_l2_error: f64,
}

/// One head's label and allotment in the executed plan (JSON only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    /// "static", "dynamic", or "full".
    pub mode: String,
    /// Sparsity score, when the plan computed one.
    pub score: Option<f64>,
    /// Retained prefill tokens (static heads).
    pub budget_tokens: Option<usize>,
    /// Retrieval slots in chunks (dynamic heads).
    pub capacity_chunks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub text_window: usize,
    pub decode_steps: usize,
    pub budget_ratio: f64,
    pub share_coefficient: f64,
    pub allocation_ratio: f64,
    pub chunk_size: usize,
    /// "absolute" or "quantile".
    pub threshold_mode: String,
    pub threshold_value: f64,
    pub top_k: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub n_full: usize,
    /// Nominal token budgets; zero for the full strategy (budgets do not
    /// apply there).
    pub b_total: usize,
    pub b_stat: usize,
    pub b_dyna: usize,
    pub static_actual_tokens: usize,
    pub dynamic_capacity_tokens: usize,
    pub full_cache_bytes: u64,
    pub fast_tier_peak_bytes: u64,
    /// `full_cache_bytes / fast_tier_peak_bytes`; `None` if nothing was ever
    /// resident.
    pub memory_reduction: Option<f64>,
    pub transfer_bytes: u64,
    pub index_metadata_bytes: u64,
    pub appended_kv_bytes: u64,
    /// Mean/min per-row cosine and mean per-row L2 distance against the
    /// uncompressed replay; `None` when there were no decode steps.
    pub mean_fidelity: Option<f64>,
    pub min_fidelity: Option<f64>,
    pub mean_l2_error: Option<f64>,
    /// The same fidelity figures split by layer; empty when there were no
    /// decode steps.
    pub fidelity_by_layer: Vec<LayerFidelity>,
    /// Per-head labels and allotments, layer-major.
    pub head_assignments: Vec<HeadReport>,
}

impl RunReport {
    pub fn new(
        header: &TraceHeader,
        config: &EngineConfig,
        plan: &EnginePlan,
        run: &EngineRun,
        fidelity: Option<FidelityStats>,
    ) -> Self {
        let (threshold_mode, threshold_value) = match config.threshold {
            ThresholdMode::Absolute(t) => ("absolute".to_string(), t),
            ThresholdMode::Quantile(q) => ("quantile".to_string(), q),
        };
        let (b_total, b_stat, b_dyna, static_actual, dynamic_capacity) = match &plan.budget {
            Some(b) => (
                b.total_budget,
                b.b_stat,
                b.b_dyna,
                b.static_actual_tokens,
                b.dynamic_capacity_tokens,
            ),
            None => (0, 0, 0, 0, 0),
        };
        let head_assignments = plan
            .assignments
            .iter()
            .enumerate()
            .map(|(slot, assignment)| {
                let (layer, head) = (slot / header.num_heads, slot % header.num_heads);
                let (mode, budget_tokens, capacity_chunks) = match assignment {
                    HeadAssignment::Static { budget } => ("static", Some(*budget), None),
                    HeadAssignment::Dynamic { capacity_chunks } => {
                        ("dynamic", None, Some(*capacity_chunks))
                    }
                    HeadAssignment::Full => ("full", None, None),
                };
                HeadReport {
                    layer,
                    head,
                    mode: mode.to_string(),
                    score: plan.scores.as_ref().map(|s| s.get(layer, head)),
                    budget_tokens,
                    capacity_chunks,
                }
            })
            .collect();
        RunReport {
            strategy: plan.strategy.to_string(),
            layers: header.num_layers,
            heads: header.num_heads,
            head_dim: header.head_dim,
            context_len: header.context_len,
            text_window: header.text_window,
            decode_steps: header.decode_steps,
            budget_ratio: config.budget_ratio,
            share_coefficient: config.share_coefficient,
            allocation_ratio: config.allocation_ratio,
            chunk_size: config.chunk_size,
            threshold_mode,
            threshold_value,
            top_k: config.resolved_top_k(header.context_len),
            n_static: run.n_static,
            n_dynamic: run.n_dynamic,
            n_full: run.n_full,
            b_total,
            b_stat,
            b_dyna,
            static_actual_tokens: static_actual,
            dynamic_capacity_tokens: dynamic_capacity,
            full_cache_bytes: run.full_cache_bytes,
            fast_tier_peak_bytes: run.fast_tier_peak_bytes,
            memory_reduction: (run.fast_tier_peak_bytes > 0)
                .then(|| run.full_cache_bytes as f64 / run.fast_tier_peak_bytes as f64),
            transfer_bytes: run.transfer_bytes,
            index_metadata_bytes: run.index_metadata_bytes,
            appended_kv_bytes: run.appended_kv_bytes,
            mean_fidelity: fidelity.as_ref().map(|f| f.overall.mean),
            min_fidelity: fidelity.as_ref().map(|f| f.overall.min),
            mean_l2_error: fidelity.as_ref().map(|f| f.overall.mean_l2),
            fidelity_by_layer: fidelity
                .as_ref()
                .map(|f| {
                    f.per_layer
                        .iter()
                        .enumerate()
                        .map(|(layer, s)| LayerFidelity {
                            layer,
                            mean_fidelity: s.mean,
                            min_fidelity: s.min,
                            mean_l2_error: s.mean_l2,
                        })
                        .collect()
                })
                .unwrap_or_default(),
            head_assignments,
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Column names for `csv_row`, comma-joined.
    pub const CSV_HEADER: &'static str = "strategy,layers,heads,head_dim,context_len,\
text_window,decode_steps,budget_ratio,share_coefficient,allocation_ratio,chunk_size,\
threshold_mode,threshold_value,top_k,n_static,n_dynamic,n_full,b_total,b_stat,b_dyna,\
static_actual_tokens,dynamic_capacity_tokens,full_cache_bytes,fast_tier_peak_bytes,\
memory_reduction,transfer_bytes,index_metadata_bytes,appended_kv_bytes,mean_fidelity,\
min_fidelity,mean_l2_error";

    /// One CSV row matching `CSV_HEADER`; optional fields render empty.
    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.layers,
            self.heads,
            self.head_dim,
            self.context_len,
            self.text_window,
            self.decode_steps,
            self.budget_ratio,
            self.share_coefficient,
            self.allocation_ratio,
            self.chunk_size,
            self.threshold_mode,
            self.threshold_value,
            self.top_k,
            self.n_static,
            self.n_dynamic,
            self.n_full,
            self.b_total,
            self.b_stat,
            self.b_dyna,
            self.static_actual_tokens,
            self.dynamic_capacity_tokens,
            self.full_cache_bytes,
            self.fast_tier_peak_bytes,
            opt(self.memory_reduction),
            self.transfer_bytes,
            self.index_metadata_bytes,
            self.appended_kv_bytes,
            opt(self.mean_fidelity),
            opt(self.min_fidelity),
            opt(self.mean_l2_error),
        )
    }
}
