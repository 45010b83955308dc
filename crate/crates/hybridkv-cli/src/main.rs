//! Benchmark front end: generate synthetic attention traces, replay them
//! under a selected cache-management strategy, compare strategies, and sweep
//! hyperparameters. Reports go to stdout (human-readable) and optionally to
//! JSON/CSV files; all output is deterministic for identical invocations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use hybridkv::classify::ThresholdMode;
use hybridkv::engine::report::RunReport;
use hybridkv::engine::EngineConfig;
use hybridkv::strategy::{execute_with_reference, run_reference, StrategyRegistry};
use hybridkv::trace::{generate_trace, read_trace_file, write_trace_file, GenSpec, TraceHeader};
use hybridkv::{Error, Result};

/// Presentation order for comparisons (registry order is alphabetical).
const COMPARE_ORDER: [&str; 5] = ["hybrid", "all-static", "all-dynamic", "uniform-static", "full"];

#[derive(Parser)]
#[command(
    name = "hybridkv",
    version,
    about = "Tiered KV-cache compression benchmark: generate traces, replay strategies, sweep knobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attention trace with planted head behaviors.
    Gen(GenArgs),
    /// Replay one strategy against a trace and report the metrics.
    Run(RunArgs),
    /// Replay several strategies at one configuration, side by side.
    Compare(CompareArgs),
    /// Replay one strategy across a grid of values for one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output trace file (a .genspec.json sidecar is written next to it).
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Head dimension d.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Context length C.
    #[arg(long, default_value_t = 1024)]
    ctx: usize,
    /// Trailing text-token count T.
    #[arg(long, default_value_t = 32)]
    text: usize,
    /// Decode steps N.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Number of heads planted with a stable focus.
    #[arg(long = "static", default_value_t = 8)]
    static_heads: usize,
    /// Number of heads planted with a shifting focus.
    #[arg(long = "dynamic", default_value_t = 8)]
    dynamic_heads: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Target attention mass on each planted focus set, in (0, 0.995].
    #[arg(long, default_value_t = GenSpec::DEFAULT_CONCENTRATION)]
    concentration: f64,
    /// Planted focus-set size per static head.
    #[arg(long = "focus-set", default_value_t = GenSpec::DEFAULT_FOCUS_SET_SIZE)]
    focus_set: usize,
}

/// Replay knobs shared by run/compare/sweep.
#[derive(Args)]
struct ConfigArgs {
    /// Per-head token budget as a fraction of the context, in (0, 1].
    #[arg(long, default_value_t = 0.10)]
    budget: f64,
    /// Dynamic share coefficient r.
    #[arg(long, default_value_t = 0.75)]
    r: f64,
    /// Static allocation blend alpha, in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Tokens per retrieval chunk.
    #[arg(long = "chunk-size", default_value_t = 8)]
    chunk_size: usize,
    /// Absolute sparsity-score threshold theta, in (0, 1).
    #[arg(long, default_value_t = 0.9, conflicts_with = "quantile")]
    theta: f64,
    /// Classify by score quantile instead of the absolute threshold.
    #[arg(long)]
    quantile: Option<f64>,
    /// Top-k width for sparsity scoring (default: ceil(0.05 * C)).
    #[arg(long = "top-k")]
    top_k: Option<usize>,
}

impl ConfigArgs {
    fn to_config(&self) -> EngineConfig {
        EngineConfig {
            budget_ratio: self.budget,
            share_coefficient: self.r,
            allocation_ratio: self.alpha,
            chunk_size: self.chunk_size,
            threshold: match self.quantile {
                Some(q) => ThresholdMode::Quantile(q),
                None => ThresholdMode::Absolute(self.theta),
            },
            top_k: self.top_k,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Trace file to replay.
    trace: PathBuf,
    #[arg(long, default_value = "hybrid")]
    strategy: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the report as one CSV row (with header).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Trace file to replay.
    trace: PathBuf,
    /// Strategies to include (comma-separated); default: all five.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write all reports as a JSON array.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write one CSV row per strategy.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Theta,
    R,
    Alpha,
    #[value(name = "budget-ratio", alias = "budget_ratio")]
    BudgetRatio,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Theta => "theta",
            SweepParam::R => "r",
            SweepParam::Alpha => "alpha",
            SweepParam::BudgetRatio => "budget_ratio",
        }
    }

    /// Static domain check; values passing this can still turn out
    /// infeasible at runtime (r against its trace-dependent bound).
    fn check_domain(self, v: f64) -> Result<()> {
        let ok = match self {
            SweepParam::Theta | SweepParam::Alpha => v > 0.0 && v < 1.0,
            SweepParam::R => v.is_finite() && v > 0.0,
            SweepParam::BudgetRatio => v > 0.0 && v <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArg(format!(
                "sweep value {v} outside the domain of {}",
                self.name()
            )))
        }
    }

    fn apply(self, base: &EngineConfig, v: f64) -> EngineConfig {
        let mut config = base.clone();
        match self {
            SweepParam::Theta => config.threshold = ThresholdMode::Absolute(v),
            SweepParam::R => config.share_coefficient = v,
            SweepParam::Alpha => config.allocation_ratio = v,
            SweepParam::BudgetRatio => config.budget_ratio = v,
        }
        config
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Trace file to replay.
    trace: PathBuf,
    /// Hyperparameter to vary; everything else stays at the baseline.
    #[arg(long)]
    parameter: SweepParam,
    /// Grid values (comma-separated).
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value = "hybrid")]
    strategy: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the sweep table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for bad requests, 2 for runtime/data failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArg(_) | Error::ShareOutOfRange { .. } | Error::InfeasibleConcentration { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = init_threads()?;
    match cli.command {
        Command::Gen(args) => cmd_gen(args, threads),
        Command::Run(args) => cmd_run(args, threads),
        Command::Compare(args) => cmd_compare(args, threads),
        Command::Sweep(args) => cmd_sweep(args, threads),
    }
}

/// Apply HYBRIDKV_THREADS to the global worker pool; returns the effective
/// thread count.
fn init_threads() -> Result<usize> {
    match std::env::var("HYBRIDKV_THREADS") {
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                Error::InvalidArg(format!("HYBRIDKV_THREADS must be a positive integer, got '{raw}'"))
            })?;
            if n == 0 {
                return Err(Error::InvalidArg("HYBRIDKV_THREADS must be >= 1".into()));
            }
            // Ignore the error if a pool already exists (tests call in-process).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(n)
        }
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

/// Print the fully resolved configuration; any run is reproducible from this
/// block alone.
fn print_effective_config(
    trace_path: &Path,
    header: &TraceHeader,
    config: &EngineConfig,
    strategies: &[&str],
    threads: usize,
) {
    let (mode, value) = match config.threshold {
        ThresholdMode::Absolute(t) => ("absolute", t),
        ThresholdMode::Quantile(q) => ("quantile", q),
    };
    println!("# effective-config");
    println!("trace             = {}", trace_path.display());
    println!(
        "trace_dims        = layers={} heads={} dim={} ctx={} text={} steps={}",
        header.num_layers,
        header.num_heads,
        header.head_dim,
        header.context_len,
        header.text_window,
        header.decode_steps
    );
    println!("strategy          = {}", strategies.join(","));
    println!("budget            = {}", config.budget_ratio);
    println!("r                 = {}", config.share_coefficient);
    println!("alpha             = {}", config.allocation_ratio);
    println!("chunk_size        = {}", config.chunk_size);
    println!("threshold_mode    = {mode}");
    println!("threshold_value   = {value}");
    println!("top_k             = {}", config.resolved_top_k(header.context_len));
    println!("threads           = {threads}");
    println!();
}

fn cmd_gen(args: GenArgs, _threads: usize) -> Result<()> {
    let spec = GenSpec::balanced(
        args.seed,
        args.layers,
        args.heads,
        args.static_heads,
        args.dynamic_heads,
        args.concentration,
        args.focus_set,
    )?;
    let header = TraceHeader::new(args.layers, args.heads, args.dim, args.ctx, args.text, args.steps);
    // Dimension mistakes on the command line are usage errors, not data errors.
    header.validate().map_err(|e| Error::InvalidArg(e.to_string()))?;
    let trace = generate_trace(&spec, &header)?;
    write_trace_file(&trace, &args.out)?;
    let sidecar = sidecar_path(&args.out);
    std::fs::write(&sidecar, {
        let mut s = serde_json::to_string_pretty(&spec).expect("spec serializes");
        s.push('\n');
        s
    })?;
    println!(
        "wrote {} (layers={} heads={} dim={} ctx={} text={} steps={})",
        args.out.display(),
        header.num_layers,
        header.num_heads,
        header.head_dim,
        header.context_len,
        header.text_window,
        header.decode_steps
    );
    println!(
        "planted {} static + {} dynamic heads, seed {}, concentration {}, focus set {}",
        args.static_heads, args.dynamic_heads, args.seed, spec.concentration, spec.focus_set_size
    );
    println!("sidecar {}", sidecar.display());
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.to_path_buf().into_os_string();
    s.push(".genspec.json");
    PathBuf::from(s)
}

fn cmd_run(args: RunArgs, threads: usize) -> Result<()> {
    let trace = read_trace_file(&args.trace)?;
    let config = args.config.to_config();
    config.validate()?;
    let registry = StrategyRegistry::builtin();
    let strategy = registry.require(&args.strategy)?;
    print_effective_config(&args.trace, &trace.header, &config, &[strategy.name()], threads);

    let reference = run_reference(&trace, &config)?;
    let outcome = execute_with_reference(&trace, strategy, &config, &reference)?;
    let report = &outcome.report;

    println!("strategy          = {}", report.strategy);
    println!("heads             = {} static / {} dynamic / {} full", report.n_static, report.n_dynamic, report.n_full);
    println!("fast_tier_peak    = {} bytes (full cache {} bytes)", report.fast_tier_peak_bytes, report.full_cache_bytes);
    println!("reduction_factor  = {}", fmt_opt(report.memory_reduction));
    println!("mean_fidelity     = {}", fmt_opt(report.mean_fidelity));
    println!("min_fidelity      = {}", fmt_opt(report.min_fidelity));
    println!("mean_l2_error     = {}", fmt_opt(report.mean_l2_error));
    println!("transfer_bytes    = {}", report.transfer_bytes);
    println!("index_metadata    = {} bytes", report.index_metadata_bytes);
    println!("appended_kv       = {} bytes", report.appended_kv_bytes);

    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json())?;
        println!("json report {}", path.display());
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, format!("{}\n{}\n", RunReport::CSV_HEADER, report.csv_row()))?;
        println!("csv report {}", path.display());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

fn cmd_compare(args: CompareArgs, threads: usize) -> Result<()> {
    let trace = read_trace_file(&args.trace)?;
    let config = args.config.to_config();
    config.validate()?;
    let registry = StrategyRegistry::builtin();
    let names: Vec<&str> = if args.strategies.is_empty() {
        COMPARE_ORDER.to_vec()
    } else {
        args.strategies.iter().map(|s| s.as_str()).collect()
    };
    // Resolve every name before doing any work.
    for name in &names {
        registry.require(name)?;
    }
    print_effective_config(&args.trace, &trace.header, &config, &names, threads);

    let reference = run_reference(&trace, &config)?;
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let outcome =
            execute_with_reference(&trace, registry.require(name)?, &config, &reference)?;
        reports.push(outcome.report);
    }

    println!(
        "{:<16} {:>7} {:>7} {:>10} {:>10} {:>10} {:>14}",
        "strategy", "static", "dynamic", "reduction", "mean_fid", "min_fid", "transfer_bytes"
    );
    for r in &reports {
        println!(
            "{:<16} {:>7} {:>7} {:>10} {:>10} {:>10} {:>14}",
            r.strategy,
            r.n_static,
            r.n_dynamic,
            r.memory_reduction.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
            r.mean_fidelity.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            r.min_fidelity.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            r.transfer_bytes,
        );
    }

    if let Some(path) = &args.json {
        let mut s = serde_json::to_string_pretty(&reports).expect("reports serialize");
        s.push('\n');
        std::fs::write(path, s)?;
        println!("\njson report {}", path.display());
    }
    if let Some(path) = &args.csv {
        let mut s = String::from(RunReport::CSV_HEADER);
        s.push('\n');
        for r in &reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        std::fs::write(path, s)?;
        println!("csv report {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, threads: usize) -> Result<()> {
    if args.values.is_empty() {
        return Err(Error::InvalidArg("sweep needs at least one value".into()));
    }
    for &v in &args.values {
        args.parameter.check_domain(v)?;
    }
    let trace = read_trace_file(&args.trace)?;
    let base = args.config.to_config();
    base.validate()?;
    let registry = StrategyRegistry::builtin();
    let strategy = registry.require(&args.strategy)?;
    print_effective_config(&args.trace, &trace.header, &base, &[strategy.name()], threads);
    println!(
        "sweep {} over {:?} ({} values)",
        args.parameter.name(),
        args.values,
        args.values.len()
    );

    // The reference replay ignores every swept knob, so share one.
    let reference = run_reference(&trace, &base)?;
    // Rows run in parallel; collection preserves the requested order.
    let rows: Vec<(f64, Result<RunReport>)> = args
        .values
        .par_iter()
        .map(|&v| {
            let config = args.parameter.apply(&base, v);
            let result = config
                .validate()
                .and_then(|()| execute_with_reference(&trace, strategy, &config, &reference))
                .map(|outcome| outcome.report);
            (v, result)
        })
        .collect();

    println!(
        "{:>12} {:>12} {:>10} {:>10} {:>7} {:>7} {:>14}",
        args.parameter.name(),
        "status",
        "reduction",
        "mean_fid",
        "static",
        "dynamic",
        "transfer_bytes"
    );
    let empty_row = vec![""; RunReport::CSV_HEADER.split(',').count()].join(",");
    let mut csv = format!("parameter,value,status,{}\n", RunReport::CSV_HEADER);
    for (v, result) in rows {
        match result {
            Ok(r) => {
                println!(
                    "{:>12} {:>12} {:>10} {:>10} {:>7} {:>7} {:>14}",
                    v,
                    "ok",
                    r.memory_reduction.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into()),
                    r.mean_fidelity.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into()),
                    r.n_static,
                    r.n_dynamic,
                    r.transfer_bytes,
                );
                csv.push_str(&format!("{},{},ok,{}\n", args.parameter.name(), v, r.csv_row()));
            }
            // A share coefficient beyond its trace-dependent bound is a
            // reportable outcome, not a crash.
            Err(Error::ShareOutOfRange { r, max }) => {
                println!(
                    "{:>12} {:>12} (r = {} exceeds feasible max {:.4})",
                    v, "infeasible", r, max
                );
                csv.push_str(&format!(
                    "{},{},infeasible,{}\n",
                    args.parameter.name(),
                    v,
                    empty_row
                ));
            }
            Err(other) => return Err(other),
        }
    }

    if let Some(path) = &args.csv {
        std::fs::write(path, &csv)?;
        println!("\ncsv report {}", path.display());
    }
    Ok(())
}
