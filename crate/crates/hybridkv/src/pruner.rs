//! Static pruning: score every context position from a short observation
//! window of recent prefill queries, then keep a budgeted subset with a
//! fixed retention priority (recent window, then historical text, then the
//! best-scoring historical visual tokens).

use crate::attention::softmax_row;
use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, TokenKind};

/// Observation window length: 32 once the context is long enough, else an
/// eighth of the context floored at 4 (and never longer than the context).
pub fn observation_window_len(context_len: usize) -> usize {
    if context_len >= 64 {
        32
    } else {
        (context_len / 8).max(4).min(context_len)
    }
}

/// Outcome of pruning one static head.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Kept context positions, ascending, `len == min(budget, C)`.
    pub kept: Vec<usize>,
    /// Window score per context position (zero beyond each row's causal
    /// prefix); sums to 1.
    pub scores: Vec<f64>,
    /// Observation window length used.
    pub window_len: usize,
}

/// Mean causal attention from the last `w` prefill query rows: row `p`
/// attends keys `0..=p` under softmax, shorter rows are zero-padded, and the
/// result is averaged over the window so it sums to 1.
pub fn window_scores(trace: &AttentionTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    let header = &trace.header;
    let (c, d) = (header.context_len, header.head_dim);
    let w = observation_window_len(c);
    let keys = trace.prefill_k_head(layer, head);
    let mut scores = vec![0.0f64; c];
    for p in (c - w)..c {
        let q = trace.prefill_q_row(layer, head, p);
        let row = softmax_row(q, &keys[..(p + 1) * d], d)?;
        for (j, &weight) in row.iter().enumerate() {
            scores[j] += weight as f64;
        }
    }
    for s in &mut scores {
        *s /= w as f64;
    }
    Ok(scores)
}

/// Rank `candidates` by score (descending, ties to the lower index) and keep
/// the first `m`. Returned in rank order.
pub fn top_scored_indices(scores: &[f64], candidates: &[usize], m: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = candidates.to_vec();
    ranked.sort_unstable_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b))
    });
    ranked.truncate(m);
    ranked
}

/// Choose the kept positions for one static head under `budget` tokens.
///
/// Priority order:
/// 1. the observation window itself, newest positions first when the budget
///    is smaller than the window;
/// 2. historical text tokens (before the window), best window score first;
/// 3. historical visual tokens, best window score first, filling whatever
///    budget remains.
pub fn prune_static_head(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    budget: usize,
) -> Result<PruneResult> {
    if budget == 0 {
        return Err(Error::InvalidArg("static head budget must be >= 1".into()));
    }
    let c = trace.header.context_len;
    let w = observation_window_len(c);
    let scores = window_scores(trace, layer, head)?;
    let b = budget.min(c);

    let mut kept: Vec<usize>;
    if b <= w {
        kept = (c - b..c).collect();
    } else {
        kept = (c - w..c).collect();
        let mut remaining = b - w;
        let window_start = c - w;
        let is_kind = |kind: TokenKind| {
            move |j: &usize| trace.token_types[*j] == kind
        };
        let text: Vec<usize> = (0..window_start).filter(is_kind(TokenKind::Text)).collect();
        let ranked_text = top_scored_indices(&scores, &text, remaining);
        remaining -= ranked_text.len();
        kept.extend(ranked_text);
        if remaining > 0 {
            let visual: Vec<usize> =
                (0..window_start).filter(is_kind(TokenKind::Visual)).collect();
            kept.extend(top_scored_indices(&scores, &visual, remaining));
        }
        kept.sort_unstable();
    }
    debug_assert_eq!(kept.len(), b);
    Ok(PruneResult { kept, scores, window_len: w })
}
