//! End-to-end pipeline checks on generated traces: planted-head structure,
//! strategy orderings, saturation behavior, and file-backed reproducibility.

use hybridkv::attention::{default_top_k, focus_count};
use hybridkv::classify::HeadLabel;
use hybridkv::engine::EngineConfig;
use hybridkv::strategy::{execute_with_reference, run_reference, StrategyRegistry};
use hybridkv::trace::{generate_trace, read_trace_file, write_trace_file, AttentionTrace, GenSpec, TraceHeader};

/// C=256 trace with 4 planted static + 4 planted dynamic heads over 2x4.
fn mid_trace() -> (GenSpec, AttentionTrace) {
    let spec = GenSpec::balanced(11, 2, 4, 4, 4, 0.95, 6).unwrap();
    let header = TraceHeader::new(2, 4, 32, 256, 16, 24);
    let trace = generate_trace(&spec, &header).unwrap();
    (spec, trace)
}

#[test]
fn planted_static_heads_concentrate_their_decode_focus() {
    let (spec, trace) = mid_trace();
    for &(l, h) in &spec.planted_static {
        // Counting width = the planted focus set size: the anchor positions
        // should absorb nearly all top-k hits across decode steps.
        let fc = focus_count(&trace, l, h, spec.focus_set_size).unwrap();
        let mut counts = fc.counts.clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = counts[..spec.focus_set_size].iter().map(|&c| c as u64).sum();
        let frac = top as f64 / fc.total() as f64;
        assert!(frac >= 0.9, "head ({l},{h}): top-{} fraction {frac}", spec.focus_set_size);
    }
}

#[test]
fn planted_dynamic_heads_spread_their_decode_focus() {
    let (spec, trace) = mid_trace();
    let k = default_top_k(trace.header.context_len);
    for &(l, h) in &spec.planted_dynamic {
        let fc = focus_count(&trace, l, h, k).unwrap();
        let mut counts = fc.counts.clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = counts[..k].iter().map(|&c| c as u64).sum();
        let frac = top as f64 / fc.total() as f64;
        assert!(frac <= 0.75, "head ({l},{h}): top-{k} fraction {frac}");
    }
}

#[test]
fn hybrid_classification_recovers_the_plant() {
    let (spec, trace) = mid_trace();
    let registry = StrategyRegistry::builtin();
    let config = EngineConfig::default();
    let plan = registry.require("hybrid").unwrap().plan(&trace, &config).unwrap();
    let classes = plan.classes.expect("hybrid classifies");
    for &(l, h) in &spec.planted_static {
        assert_eq!(classes.get(l, h), HeadLabel::Static, "head ({l},{h})");
    }
    for &(l, h) in &spec.planted_dynamic {
        assert_eq!(classes.get(l, h), HeadLabel::Dynamic, "head ({l},{h})");
    }
}

#[test]
fn strategy_orderings_hold_on_a_generated_trace() {
    let (_, trace) = mid_trace();
    let registry = StrategyRegistry::builtin();
    let config = EngineConfig::default();
    let reference = run_reference(&trace, &config).unwrap();
    let hybrid =
        execute_with_reference(&trace, registry.require("hybrid").unwrap(), &config, &reference)
            .unwrap();
    let all_static = execute_with_reference(
        &trace,
        registry.require("all-static").unwrap(),
        &config,
        &reference,
    )
    .unwrap();
    let all_dynamic = execute_with_reference(
        &trace,
        registry.require("all-dynamic").unwrap(),
        &config,
        &reference,
    )
    .unwrap();

    let f_hybrid = hybrid.report.mean_fidelity.unwrap();
    let f_static = all_static.report.mean_fidelity.unwrap();
    assert!(
        f_hybrid > f_static,
        "hybrid {f_hybrid} should beat all-static {f_static}"
    );
    assert!(
        hybrid.report.transfer_bytes < all_dynamic.report.transfer_bytes,
        "hybrid {} should move fewer bytes than all-dynamic {}",
        hybrid.report.transfer_bytes,
        all_dynamic.report.transfer_bytes
    );
    // Only dynamic heads maintain summary metadata.
    assert!(hybrid.report.index_metadata_bytes < all_dynamic.report.index_metadata_bytes);
    assert_eq!(all_static.report.transfer_bytes, 0);
}

#[test]
fn saturated_budget_is_lossless_on_a_generated_trace() {
    let (_, trace) = mid_trace();
    let registry = StrategyRegistry::builtin();
    let config = EngineConfig { budget_ratio: 1.0, ..EngineConfig::default() };
    let reference = run_reference(&trace, &config).unwrap();
    let hybrid =
        execute_with_reference(&trace, registry.require("hybrid").unwrap(), &config, &reference)
            .unwrap();
    for (a, b) in reference.outputs.iter().zip(hybrid.run.outputs.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(hybrid.report.mean_fidelity, Some(1.0));
    assert_eq!(hybrid.report.min_fidelity, Some(1.0));
}

#[test]
fn file_round_trip_preserves_replay_reports() {
    let (_, trace) = mid_trace();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.hkvt");
    write_trace_file(&trace, &path).unwrap();
    let reloaded = read_trace_file(&path).unwrap();

    let registry = StrategyRegistry::builtin();
    let config = EngineConfig::default();
    let a = hybridkv::strategy::execute(&trace, "hybrid", &config, &registry).unwrap();
    let b = hybridkv::strategy::execute(&reloaded, "hybrid", &config, &registry).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_json(), b.report.to_json());
    for (x, y) in a.run.outputs.iter().zip(b.run.outputs.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn budget_sweep_reduces_memory_monotonically() {
    let (_, trace) = mid_trace();
    let registry = StrategyRegistry::builtin();
    let mut last_peak = u64::MAX;
    let mut last_fidelity = f64::INFINITY;
    // Shrinking the budget must shrink residency; fidelity may only drop.
    for ratio in [0.40, 0.20, 0.10, 0.05] {
        let config = EngineConfig { budget_ratio: ratio, ..EngineConfig::default() };
        let reference = run_reference(&trace, &config).unwrap();
        let outcome = execute_with_reference(
            &trace,
            registry.require("hybrid").unwrap(),
            &config,
            &reference,
        )
        .unwrap();
        let peak = outcome.report.fast_tier_peak_bytes;
        let fidelity = outcome.report.mean_fidelity.unwrap();
        assert!(peak < last_peak, "ratio {ratio}: peak {peak} vs {last_peak}");
        assert!(
            fidelity <= last_fidelity + 1e-9,
            "ratio {ratio}: fidelity {fidelity} rose above {last_fidelity}"
        );
        last_peak = peak;
        last_fidelity = fidelity;
    }
}
