//! Deterministic synthetic trace generator.
//!
//! Heads are planted as either *static* or *dynamic*:
//!
//! * a static head gets a fixed anchor set whose keys align with a
//!   head-specific direction; every text and decode query points at that
//!   direction, so the anchors absorb at least the requested `concentration`
//!   of attention mass on every row;
//! * a dynamic head partitions the context into groups with mutually
//!   orthogonal key directions and rotates its decode queries across the
//!   groups, so no small fixed token set dominates the cumulative top-k
//!   focus counts over the decode steps.
//!
//! All randomness flows from `GenSpec::seed` through per-head ChaCha streams,
//! so identical inputs produce byte-identical traces.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, TokenKind, TraceHeader};

/// Relative magnitude of per-row query noise.
const QUERY_NOISE: f64 = 0.05;
/// Static decode queries rotate a secondary component across a few fixed
/// directions; this keeps chunk-score rankings for such heads from freezing
/// when they are (ablation-)compressed dynamically, without disturbing the
/// anchor mass.
const STATIC_WOBBLE: f64 = 0.3;
const STATIC_WOBBLE_DIRS: usize = 8;
/// Log-odds safety margin added on top of the analytic anchor-logit target.
const STATIC_MARGIN: f64 = 6.0;
/// Attention mass a dynamic head concentrates on its active group per step.
const DYNAMIC_GROUP_MASS: f64 = 0.9;
const DYNAMIC_MARGIN: f64 = 5.0;
/// Additive key noise for dynamic heads.
const DYNAMIC_KEY_NOISE: f64 = 0.5;
/// Scale of dynamic heads' prefill queries: small enough that their
/// text-centric rows stay near-uniform.
const DYNAMIC_TEXT_QUERY_SCALE: f64 = 0.2;
/// Concentrations above this cannot be guaranteed in f32 arithmetic.
const MAX_CONCENTRATION: f64 = 0.995;

/// Recipe for planting head behaviors into a generated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    /// Heads generated with a fixed high-mass anchor set.
    pub planted_static: BTreeSet<(usize, usize)>,
    /// Heads generated with rotating decode focus.
    pub planted_dynamic: BTreeSet<(usize, usize)>,
    /// Minimum attention mass the anchor set receives on every text and
    /// decode query row of a planted static head. Must lie in (0, 0.995].
    pub concentration: f64,
    /// Anchor-set size for planted static heads.
    pub focus_set_size: usize,
}

impl GenSpec {
    pub const DEFAULT_CONCENTRATION: f64 = 0.95;
    pub const DEFAULT_FOCUS_SET_SIZE: usize = 8;

    /// Spread `n_static` + `n_dynamic` labels over all `layers * heads` slots
    /// with a seed-derived shuffle. The counts must cover every head exactly.
    pub fn balanced(
        seed: u64,
        layers: usize,
        heads: usize,
        n_static: usize,
        n_dynamic: usize,
        concentration: f64,
        focus_set_size: usize,
    ) -> Result<Self> {
        let total = layers * heads;
        if n_static + n_dynamic > total {
            return Err(Error::InvalidArg(format!(
                "planted sets exceed head count: {n_static} static + {n_dynamic} dynamic > {total}"
            )));
        }
        if n_static + n_dynamic < total {
            return Err(Error::InvalidArg(format!(
                "planted sets must cover all heads: {n_static} static + {n_dynamic} dynamic < {total}"
            )));
        }
        let mut slots: Vec<(usize, usize)> = (0..layers)
            .flat_map(|l| (0..heads).map(move |h| (l, h)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xA5A5_5A5A_0F0F_F0F0));
        for i in (1..slots.len()).rev() {
            let j = rng.gen_range(0..=i);
            slots.swap(i, j);
        }
        Ok(GenSpec {
            seed,
            planted_static: slots[..n_static].iter().copied().collect(),
            planted_dynamic: slots[n_static..].iter().copied().collect(),
            concentration,
            focus_set_size,
        })
    }
}

/// Generate a trace with the planted behaviors described by `spec`.
pub fn generate_trace(spec: &GenSpec, header: &TraceHeader) -> Result<AttentionTrace> {
    header.validate()?;
    validate_spec(spec, header)?;

    let mut trace = AttentionTrace::zeroed(*header);
    let (layers, heads) = (header.num_layers, header.num_heads);
    for layer in 0..layers {
        for head in 0..heads {
            let head_seed = splitmix64(
                spec.seed ^ ((layer * heads + head + 1) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
            if spec.planted_static.contains(&(layer, head)) {
                fill_static_head(&mut trace, layer, head, spec, &mut rng);
            } else {
                fill_dynamic_head(&mut trace, layer, head, &mut rng);
            }
        }
    }
    debug_assert!(trace.validate().is_ok());
    Ok(trace)
}

fn validate_spec(spec: &GenSpec, header: &TraceHeader) -> Result<()> {
    let (layers, heads, c) = (header.num_layers, header.num_heads, header.context_len);
    let total = layers * heads;
    if spec.planted_static.intersection(&spec.planted_dynamic).next().is_some() {
        return Err(Error::InvalidArg(
            "planted static and dynamic sets overlap".into(),
        ));
    }
    if spec.planted_static.len() + spec.planted_dynamic.len() != total {
        return Err(Error::InvalidArg(format!(
            "planted sets must partition all {total} heads (got {} + {})",
            spec.planted_static.len(),
            spec.planted_dynamic.len()
        )));
    }
    for &(l, h) in spec.planted_static.iter().chain(spec.planted_dynamic.iter()) {
        if l >= layers || h >= heads {
            return Err(Error::InvalidArg(format!(
                "planted head ({l}, {h}) is out of range for {layers} layers x {heads} heads"
            )));
        }
    }
    if spec.focus_set_size == 0 || spec.focus_set_size > c {
        return Err(Error::InvalidArg(format!(
            "focus_set_size {} must lie in 1..={c}",
            spec.focus_set_size
        )));
    }
    if !spec.planted_static.is_empty() {
        // The anchors must fit inside the 5%-of-C top-k window or the planted
        // score separation cannot be realized at all.
        let k = c.div_ceil(20);
        let feasible = spec.concentration > 0.0
            && spec.concentration <= MAX_CONCENTRATION
            && spec.focus_set_size <= k;
        if !feasible {
            return Err(Error::InfeasibleConcentration {
                concentration: spec.concentration,
                context_len: c,
                focus_set_size: spec.focus_set_size,
            });
        }
    }
    Ok(())
}

fn fill_static_head(
    trace: &mut AttentionTrace,
    layer: usize,
    head: usize,
    spec: &GenSpec,
    rng: &mut ChaCha8Rng,
) {
    let h = trace.header;
    let (c, t, d, n) = (h.context_len, h.text_window, h.head_dim, h.decode_steps);
    let sqrt_d = (d as f64).sqrt();
    let m = spec.focus_set_size;
    let gamma = spec.concentration;

    let direction = unit_vector(rng, d);
    // Prefer historical (visual) positions so the anchors exercise the
    // pruner's top-M selection; fall back to the whole context if the
    // historical region is too small.
    let pool = if c - t >= m { c - t } else { c };
    let anchors = sample_distinct(rng, pool, m);
    // Anchor logit target: odds of gamma against ~C competitors whose scaled
    // logits are roughly standard normal, plus a wide safety margin.
    let delta = ((gamma / (1.0 - gamma)) * (c as f64 / m as f64)).ln() + STATIC_MARGIN;
    let wobble: Vec<Vec<f64>> = (0..STATIC_WOBBLE_DIRS.min(d))
        .map(|_| unit_vector(rng, d))
        .collect();

    for pos in 0..c {
        let row = key_row_mut(&mut trace.prefill_k, &h, layer, head, pos);
        if anchors.contains(&pos) {
            for (out, u) in row.iter_mut().zip(&direction) {
                *out = (delta * u) as f32;
            }
        } else {
            fill_standard_normal(rng, row);
        }
    }
    for pos in 0..c {
        let noise = unit_vector(rng, d);
        let row = key_row_mut(&mut trace.prefill_q, &h, layer, head, pos);
        for i in 0..d {
            row[i] = (sqrt_d * (direction[i] + QUERY_NOISE * noise[i])) as f32;
        }
    }
    fill_standard_normal(rng, head_block_mut(&mut trace.prefill_v, &h, layer, head));

    for step in 0..n {
        let wob = &wobble[step % wobble.len()];
        let noise = unit_vector(rng, d);
        let q = decode_row_mut(&mut trace.decode_q, &h, step, layer, head);
        for i in 0..d {
            q[i] = (sqrt_d * (direction[i] + STATIC_WOBBLE * wob[i] + QUERY_NOISE * noise[i]))
                as f32;
        }
        fill_standard_normal(rng, decode_row_mut(&mut trace.decode_k, &h, step, layer, head));
        fill_standard_normal(rng, decode_row_mut(&mut trace.decode_v, &h, step, layer, head));
    }
}

fn fill_dynamic_head(
    trace: &mut AttentionTrace,
    layer: usize,
    head: usize,
    rng: &mut ChaCha8Rng,
) {
    let h = trace.header;
    let (c, d, n) = (h.context_len, h.head_dim, h.decode_steps);
    let sqrt_d = (d as f64).sqrt();

    if d < 2 || c < 4 {
        // Too small to carry group structure; pure noise is already diffuse.
        fill_standard_normal(rng, head_block_mut(&mut trace.prefill_k, &h, layer, head));
        fill_standard_normal(rng, head_block_mut(&mut trace.prefill_q, &h, layer, head));
        fill_standard_normal(rng, head_block_mut(&mut trace.prefill_v, &h, layer, head));
        for step in 0..n {
            for tensor in [&mut trace.decode_q, &mut trace.decode_k, &mut trace.decode_v] {
                fill_standard_normal(rng, decode_row_mut(tensor, &h, step, layer, head));
            }
        }
        return;
    }

    let groups = dynamic_group_count(c, d);
    let group_len = c.div_ceil(groups);
    let n_groups = c.div_ceil(group_len);
    let dirs = orthonormal_set(rng, n_groups, d);
    let delta = ((DYNAMIC_GROUP_MASS / (1.0 - DYNAMIC_GROUP_MASS)) * (c as f64 / group_len as f64))
        .ln()
        + DYNAMIC_MARGIN;

    for pos in 0..c {
        let dir = &dirs[pos / group_len];
        let row = key_row_mut(&mut trace.prefill_k, &h, layer, head, pos);
        for i in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            row[i] = (delta * dir[i] + DYNAMIC_KEY_NOISE * noise) as f32;
        }
    }
    for pos in 0..c {
        let noise = unit_vector(rng, d);
        let row = key_row_mut(&mut trace.prefill_q, &h, layer, head, pos);
        for i in 0..d {
            row[i] = (DYNAMIC_TEXT_QUERY_SCALE * sqrt_d * noise[i]) as f32;
        }
    }
    fill_standard_normal(rng, head_block_mut(&mut trace.prefill_v, &h, layer, head));

    let offset = rng.gen_range(0..n_groups);
    for step in 0..n {
        let dir = &dirs[(step + offset) % n_groups];
        let noise = unit_vector(rng, d);
        let q = decode_row_mut(&mut trace.decode_q, &h, step, layer, head);
        for i in 0..d {
            q[i] = (sqrt_d * (dir[i] + QUERY_NOISE * noise[i])) as f32;
        }
        fill_standard_normal(rng, decode_row_mut(&mut trace.decode_k, &h, step, layer, head));
        fill_standard_normal(rng, decode_row_mut(&mut trace.decode_v, &h, step, layer, head));
    }
}

/// Number of rotation groups for a dynamic head: enough that no single group
/// dominates cumulative focus counts, capped by the dimension so group
/// directions can be mutually orthogonal.
fn dynamic_group_count(c: usize, d: usize) -> usize {
    (c / 16).max(4).min(d).min(c).max(2)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `count` mutually orthonormal directions in R^d (`count <= d`).
fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    assert!(count <= d, "cannot fit {count} orthonormal directions in R^{d}");
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for prev in &dirs {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    dirs
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: usize, count: usize) -> BTreeSet<usize> {
    debug_assert!(count <= pool);
    let mut indices: Vec<usize> = (0..pool).collect();
    for i in 0..count {
        let j = rng.gen_range(i..pool);
        indices.swap(i, j);
    }
    indices[..count].iter().copied().collect()
}

fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out.iter_mut() {
        let x: f64 = rng.sample(StandardNormal);
        *v = x as f32;
    }
}

fn key_row_mut<'a>(
    tensor: &'a mut [f32],
    h: &TraceHeader,
    layer: usize,
    head: usize,
    pos: usize,
) -> &'a mut [f32] {
    let d = h.head_dim;
    let start = ((layer * h.num_heads + head) * h.context_len + pos) * d;
    &mut tensor[start..start + d]
}

fn head_block_mut<'a>(
    tensor: &'a mut [f32],
    h: &TraceHeader,
    layer: usize,
    head: usize,
) -> &'a mut [f32] {
    let len = h.context_len * h.head_dim;
    let start = (layer * h.num_heads + head) * len;
    &mut tensor[start..start + len]
}

fn decode_row_mut<'a>(
    tensor: &'a mut [f32],
    h: &TraceHeader,
    step: usize,
    layer: usize,
    head: usize,
) -> &'a mut [f32] {
    let d = h.head_dim;
    let start = ((step * h.num_layers + layer) * h.num_heads + head) * d;
    &mut tensor[start..start + d]
}

#[allow(unused)]
fn token_kind_at(trace: &AttentionTrace, pos: usize) -> TokenKind {
    trace.token_types[pos]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::write_trace;

    fn small_header() -> TraceHeader {
        TraceHeader::new(1, 2, 32, 128, 8, 16)
    }

    fn small_spec(seed: u64) -> GenSpec {
        GenSpec::balanced(seed, 1, 2, 1, 1, 0.95, 4).unwrap()
    }

    #[test]
    fn identical_inputs_produce_identical_bytes() {
        let header = small_header();
        let spec = small_spec(11);
        let a = generate_trace(&spec, &header).unwrap();
        let b = generate_trace(&spec, &header).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        write_trace(&a, &mut bytes_a).unwrap();
        write_trace(&b, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn different_seeds_differ() {
        let header = small_header();
        let a = generate_trace(&small_spec(1), &header).unwrap();
        let b = generate_trace(&small_spec(2), &header).unwrap();
        assert_ne!(a.prefill_k, b.prefill_k);
    }

    #[test]
    fn balanced_rejects_miscounted_sets() {
        let err = GenSpec::balanced(0, 2, 8, 20, 0, 0.95, 8).unwrap_err();
        assert!(err.to_string().contains("planted sets exceed head count"));
        let err = GenSpec::balanced(0, 2, 8, 4, 4, 0.95, 8).unwrap_err();
        assert!(err.to_string().contains("must cover all heads"));
    }

    #[test]
    fn infeasible_concentration_is_rejected() {
        let header = small_header();
        let mut spec = small_spec(3);
        spec.concentration = 0.9999;
        assert!(matches!(
            generate_trace(&spec, &header),
            Err(Error::InfeasibleConcentration { .. })
        ));
        // Anchor set wider than the 5% top-k window is equally infeasible.
        let mut spec = small_spec(3);
        spec.focus_set_size = 64; // ceil(0.05 * 128) = 7
        assert!(matches!(
            generate_trace(&spec, &header),
            Err(Error::InfeasibleConcentration { .. })
        ));
    }

    #[test]
    fn spec_must_partition_heads() {
        let header = small_header();
        let mut spec = small_spec(4);
        spec.planted_dynamic.clear();
        assert!(matches!(
            generate_trace(&spec, &header),
            Err(Error::InvalidArg(_))
        ));
    }

    #[test]
    fn generated_trace_validates() {
        let header = TraceHeader::new(2, 2, 16, 64, 4, 8);
        let spec = GenSpec::balanced(7, 2, 2, 2, 2, 0.9, 3).unwrap();
        let trace = generate_trace(&spec, &header).unwrap();
        trace.validate().unwrap();
    }

    #[test]
    fn genspec_json_round_trips() {
        let spec = small_spec(9);
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: GenSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
