//! Strategy registry: each cache-management approach implements one trait
//! and registers under a name, so runs, comparisons, and sweeps select
//! behavior at runtime.
//!
//! Built-ins:
//! - `hybrid`        — classify heads, prune static ones, retrieve for dynamic ones
//! - `all-static`    — every head pruned once (score-weighted budgets)
//! - `all-dynamic`   — every head retrieves chunks per step
//! - `uniform-static`— every head pruned once with an equal budget
//! - `full`          — no compression (the fidelity reference)

use std::collections::BTreeMap;

use crate::budget::{build_plan, BudgetPlan};
use crate::classify::{classify_heads_with_mode, compute_scores, HeadClass, HeadLabel, SparsityScores};
use crate::engine::{self, EngineConfig, EnginePlan, EngineRun, HeadAssignment};
use crate::engine::report::RunReport;
use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// One cache-management approach, selectable by name at runtime.
pub trait CompressionStrategy: Send + Sync {
    /// Registry key (stable, kebab-case).
    fn name(&self) -> &'static str;
    /// One-line description for listings.
    fn summary(&self) -> &'static str;
    /// Resolve per-head assignments for this trace and configuration.
    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan>;
}

/// Turn labels plus budget figures into per-head assignments.
fn assignments_from(classes: &HeadClass, budget: &BudgetPlan) -> Result<Vec<HeadAssignment>> {
    let mut assignments = Vec::with_capacity(classes.layers * classes.heads);
    for layer in 0..classes.layers {
        for head in 0..classes.heads {
            let key = (layer, head);
            let assignment = match classes.get(layer, head) {
                HeadLabel::Static => {
                    let b = *budget.per_head_static.get(&key).ok_or_else(|| {
                        Error::Shape(format!("budget plan is missing static head {key:?}"))
                    })?;
                    HeadAssignment::Static { budget: b }
                }
                HeadLabel::Dynamic => {
                    let c = *budget.per_head_dynamic_chunks.get(&key).ok_or_else(|| {
                        Error::Shape(format!("budget plan is missing dynamic head {key:?}"))
                    })?;
                    HeadAssignment::Dynamic { capacity_chunks: c }
                }
            };
            assignments.push(assignment);
        }
    }
    Ok(assignments)
}

struct Hybrid;

impl CompressionStrategy for Hybrid {
    fn name(&self) -> &'static str {
        "hybrid"
    }

    fn summary(&self) -> &'static str {
        "classify heads by text-attention sparsity; prune static heads, retrieve for dynamic heads"
    }

    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan> {
        config.validate()?;
        let header = &trace.header;
        let k = config.resolved_top_k(header.context_len);
        let (scores, classes) = classify_heads_with_mode(trace, config.threshold, k)?;
        let budget = build_plan(&config.budget_config(header), &classes, &scores)?;
        let assignments = assignments_from(&classes, &budget)?;
        Ok(EnginePlan {
            strategy: self.name(),
            chunk_size: config.chunk_size,
            assignments,
            scores: Some(scores),
            classes: Some(classes),
            budget: Some(budget),
        })
    }
}

struct AllStatic;

impl CompressionStrategy for AllStatic {
    fn name(&self) -> &'static str {
        "all-static"
    }

    fn summary(&self) -> &'static str {
        "treat every head as static; sparsity scores still weight the per-head budgets"
    }

    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan> {
        config.validate()?;
        let header = &trace.header;
        let k = config.resolved_top_k(header.context_len);
        let scores = compute_scores(trace, k)?;
        // Labels assigned by fiat; the recorded threshold is moot.
        let classes = HeadClass::uniform(header.num_layers, header.num_heads, HeadLabel::Static, 0.0);
        let budget = build_plan(&config.budget_config(header), &classes, &scores)?;
        let assignments = assignments_from(&classes, &budget)?;
        Ok(EnginePlan {
            strategy: self.name(),
            chunk_size: config.chunk_size,
            assignments,
            scores: Some(scores),
            classes: Some(classes),
            budget: Some(budget),
        })
    }
}

struct AllDynamic;

impl CompressionStrategy for AllDynamic {
    fn name(&self) -> &'static str {
        "all-dynamic"
    }

    fn summary(&self) -> &'static str {
        "treat every head as dynamic; the whole budget funds chunk retrieval"
    }

    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan> {
        config.validate()?;
        let header = &trace.header;
        let classes = HeadClass::uniform(header.num_layers, header.num_heads, HeadLabel::Dynamic, 0.0);
        // No head is static, so allocation never reads these scores; zeros
        // would be rejected loudly if that ever changed.
        let scores = SparsityScores {
            layers: header.num_layers,
            heads: header.num_heads,
            scores: vec![0.0; header.num_layers * header.num_heads],
            k_used: config.resolved_top_k(header.context_len),
        };
        let budget = build_plan(&config.budget_config(header), &classes, &scores)?;
        let assignments = assignments_from(&classes, &budget)?;
        Ok(EnginePlan {
            strategy: self.name(),
            chunk_size: config.chunk_size,
            assignments,
            scores: None,
            classes: Some(classes),
            budget: Some(budget),
        })
    }
}

struct UniformStatic;

impl CompressionStrategy for UniformStatic {
    fn name(&self) -> &'static str {
        "uniform-static"
    }

    fn summary(&self) -> &'static str {
        "prune every head to the same budget, ignoring sparsity scores"
    }

    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan> {
        config.validate()?;
        let header = &trace.header;
        let slots = header.num_layers * header.num_heads;
        let total = config.total_budget(header);
        // total is per_head * slots by construction, so this is exact.
        let per_head = total / slots;
        let mut budget = BudgetPlan {
            total_budget: total,
            b_stat: total,
            b_dyna: 0,
            mean_budget: per_head as f64,
            per_head_static: BTreeMap::new(),
            per_head_dynamic_chunks: BTreeMap::new(),
            static_actual_tokens: total,
            dynamic_capacity_tokens: 0,
            zero_capacity_warning: false,
        };
        for layer in 0..header.num_layers {
            for head in 0..header.num_heads {
                budget.per_head_static.insert((layer, head), per_head);
            }
        }
        Ok(EnginePlan {
            strategy: self.name(),
            chunk_size: config.chunk_size,
            assignments: vec![HeadAssignment::Static { budget: per_head }; slots],
            scores: None,
            classes: None,
            budget: Some(budget),
        })
    }
}

struct FullCache;

impl CompressionStrategy for FullCache {
    fn name(&self) -> &'static str {
        "full"
    }

    fn summary(&self) -> &'static str {
        "keep the entire cache resident; reference for fidelity and reduction"
    }

    fn plan(&self, trace: &AttentionTrace, config: &EngineConfig) -> Result<EnginePlan> {
        config.validate()?;
        let header = &trace.header;
        Ok(EnginePlan {
            strategy: self.name(),
            chunk_size: config.chunk_size,
            assignments: vec![HeadAssignment::Full; header.num_layers * header.num_heads],
            scores: None,
            classes: None,
            budget: None,
        })
    }
}

/// Name-keyed strategy collection.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn CompressionStrategy>>,
}

impl StrategyRegistry {
    /// Registry holding the five built-in strategies.
    pub fn builtin() -> Self {
        let mut registry = Self { strategies: BTreeMap::new() };
        registry.register(Box::new(Hybrid));
        registry.register(Box::new(AllStatic));
        registry.register(Box::new(AllDynamic));
        registry.register(Box::new(UniformStatic));
        registry.register(Box::new(FullCache));
        registry
    }

    /// Add or replace a strategy under its own name.
    pub fn register(&mut self, strategy: Box<dyn CompressionStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Option<&dyn CompressionStrategy> {
        self.strategies.get(name).map(|s| s.as_ref())
    }

    /// Registered names, sorted.
    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }

    /// Resolve a name or fail with the available choices.
    pub fn require(&self, name: &str) -> Result<&dyn CompressionStrategy> {
        self.get(name).ok_or_else(|| {
            Error::InvalidArg(format!(
                "unknown strategy '{name}' (available: {})",
                self.names().join(", ")
            ))
        })
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Report plus raw run, for callers that need the outputs as well.
pub struct StrategyOutcome {
    pub report: RunReport,
    pub run: EngineRun,
}

/// Replay the uncompressed cache: the reference every fidelity number is
/// measured against.
pub fn run_reference(trace: &AttentionTrace, config: &EngineConfig) -> Result<EngineRun> {
    let plan = FullCache.plan(trace, config)?;
    engine::run(trace, &plan)
}

/// Plan and replay `strategy`, measuring fidelity against `reference`
/// (obtain it from [`run_reference`]).
pub fn execute_with_reference(
    trace: &AttentionTrace,
    strategy: &dyn CompressionStrategy,
    config: &EngineConfig,
    reference: &EngineRun,
) -> Result<StrategyOutcome> {
    let plan = strategy.plan(trace, config)?;
    let run = engine::run(trace, &plan)?;
    let fidelity = engine::fidelity_stats(reference, &run)?;
    let report = RunReport::new(&trace.header, config, &plan, &run, fidelity);
    Ok(StrategyOutcome { report, run })
}

/// Convenience wrapper: run the named strategy against a freshly computed
/// reference.
pub fn execute(
    trace: &AttentionTrace,
    name: &str,
    config: &EngineConfig,
    registry: &StrategyRegistry,
) -> Result<StrategyOutcome> {
    let strategy = registry.require(name)?;
    let reference = run_reference(trace, config)?;
    execute_with_reference(trace, strategy, config, &reference)
}
