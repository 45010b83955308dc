//! Head classification: score how concentrated each head's text-centric
//! attention is, then label heads static or dynamic against a threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{text_centric_attention, topk_indices};
use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// Compression treatment chosen for a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    /// Stable focus: prune once at prefill.
    Static,
    /// Moving focus: retrieve chunks per decode step.
    Dynamic,
}

/// Per-head sparsity scores in `[0, 1]`, flat `[L * H]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityScores {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<f64>,
    /// Top-k width the scores were computed with.
    pub k_used: usize,
}

impl SparsityScores {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.heads + head]
    }
}

/// Per-head labels plus the effective threshold that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadClass {
    pub layers: usize,
    pub heads: usize,
    pub labels: Vec<HeadLabel>,
    /// Resolved score cutoff: labels from classification satisfy
    /// `label == Static <=> score >= threshold`.
    pub threshold: f64,
}

impl HeadClass {
    /// A classification where every head carries the same label (used by the
    /// ablation strategies, which assign labels by fiat).
    pub fn uniform(layers: usize, heads: usize, label: HeadLabel, threshold: f64) -> Self {
        HeadClass {
            layers,
            heads,
            labels: vec![label; layers * heads],
            threshold,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> HeadLabel {
        self.labels[layer * self.heads + head]
    }

    pub fn n_static(&self) -> usize {
        self.labels.iter().filter(|l| **l == HeadLabel::Static).count()
    }

    pub fn n_dynamic(&self) -> usize {
        self.labels.len() - self.n_static()
    }

    /// (static, dynamic) head counts within one layer.
    pub fn layer_counts(&self, layer: usize) -> (usize, usize) {
        let row = &self.labels[layer * self.heads..(layer + 1) * self.heads];
        let ns = row.iter().filter(|l| **l == HeadLabel::Static).count();
        (ns, self.heads - ns)
    }
}

/// How the static/dynamic cutoff is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Fixed score cutoff in (0, 1).
    Absolute(f64),
    /// Cutoff at the given quantile of the observed score distribution,
    /// quantile in (0, 1). Heads scoring at or above the cutoff are static.
    Quantile(f64),
}

/// Mean over the T text rows of the summed top-k attention mass: how much of
/// each text-centric row lives in its k heaviest entries.
pub fn sparsity_score(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    k: usize,
) -> Result<f64> {
    let c = trace.header.context_len;
    if k == 0 || k > c {
        return Err(Error::InvalidArg(format!("k = {k} must lie in 1..={c}")));
    }
    let rows = text_centric_attention(trace, layer, head)?;
    let mut acc = 0.0f64;
    for row in &rows {
        let top = topk_indices(&row.weights, k)?;
        acc += top.iter().map(|&j| row.weights[j] as f64).sum::<f64>();
    }
    Ok(acc / rows.len() as f64)
}

/// Sparsity scores for every head, computed in parallel.
pub fn compute_scores(trace: &AttentionTrace, k: usize) -> Result<SparsityScores> {
    let h = &trace.header;
    let pairs: Vec<(usize, usize)> = (0..h.num_layers)
        .flat_map(|l| (0..h.num_heads).map(move |hd| (l, hd)))
        .collect();
    let scores = pairs
        .par_iter()
        .map(|&(l, hd)| sparsity_score(trace, l, hd, k))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SparsityScores {
        layers: h.num_layers,
        heads: h.num_heads,
        scores,
        k_used: k,
    })
}

/// Classify every head with an absolute threshold `theta` in (0, 1).
pub fn classify_heads(
    trace: &AttentionTrace,
    theta: f64,
    k: usize,
) -> Result<(SparsityScores, HeadClass)> {
    classify_heads_with_mode(trace, ThresholdMode::Absolute(theta), k)
}

/// Classify every head, resolving the cutoff per `mode`.
pub fn classify_heads_with_mode(
    trace: &AttentionTrace,
    mode: ThresholdMode,
    k: usize,
) -> Result<(SparsityScores, HeadClass)> {
    let scores = compute_scores(trace, k)?;
    let cutoff = match mode {
        ThresholdMode::Absolute(theta) => {
            if !(theta > 0.0 && theta < 1.0) {
                return Err(Error::InvalidArg(format!(
                    "theta = {theta} must lie in (0, 1)"
                )));
            }
            theta
        }
        ThresholdMode::Quantile(q) => {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::InvalidArg(format!(
                    "quantile = {q} must lie in (0, 1)"
                )));
            }
            // Cutoff at the q-th order position so (roughly) the top 1 - q
            // fraction of heads classify static.
            let mut sorted = scores.scores.clone();
            sorted.sort_by(f64::total_cmp);
            let rank = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
            sorted[rank]
        }
    };
    let labels = scores
        .scores
        .iter()
        .map(|&s| {
            if s >= cutoff {
                HeadLabel::Static
            } else {
                HeadLabel::Dynamic
            }
        })
        .collect();
    let class = HeadClass {
        layers: scores.layers,
        heads: scores.heads,
        labels,
        threshold: cutoff,
    };
    Ok((scores, class))
}
