//! Command-line front end: `gen`, `analyze`, `compress`, `eval`, `bench`.
//!
//! Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
//! `VLCACHE_THREADS` overrides `--threads`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{latency_throughput_curve, run_bench, write_curve_csv, BenchModel, BenchSpec};
use crate::budget::{allocate_pyramid, allocate_sparsity_aware, allocate_uniform, AllocationMethod, BudgetConfig};
use crate::error::{Error, Result};
use crate::eval::{hit_rate_sweep, mean_over_heads, modality_stats, EvalWindow, OracleRows};
use crate::scoring::{compress_cache_with, EvictionConfig, ScoringPolicy, StatsSource};
use crate::sparsity::{
    curve_similarity, decoding_sparsity, post_vision_sparsity, prefill_sparsity, stats_window_sparsity, LayerSparsity,
    Phase, SparsityConfig,
};
use crate::trace::{generate_trace, read_trace, write_trace, AttentionTrace, GenSpec};

pub const THREADS_ENV: &str = "VLCACHE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "vlcache", version, about = "KV-cache compression for vision-language attention traces")]
pub struct Cli {
    /// Worker threads for parallel sections (overridden by VLCACHE_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace file.
    Gen(GenCmd),
    /// Sparsity per layer and head for prefill, post-vision and decoding rows.
    Analyze(AnalyzeCmd),
    /// Allocate budgets and evict; writes allocation and kept-set JSON.
    Compress(CompressCmd),
    /// Cache hit rates over policies and budgets, plus modality metrics.
    Eval(EvalCmd),
    /// Full versus compressed decoding micro-benchmark.
    Bench(BenchCmd),
}

/// Generator settings other than the prompt length.
#[derive(Debug, Clone, Args)]
pub struct GenParams {
    /// Post-vision text tokens at the end of the prompt.
    #[arg(long, default_value_t = 16)]
    pub tau: usize,
    /// Text tokens before the vision segment.
    #[arg(long = "pre", default_value_t = 0)]
    pub pre_vision: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    /// Decoding rows appended after the prompt.
    #[arg(long = "decode", default_value_t = 8)]
    pub decode_len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub heavy_fraction: f64,
    #[arg(long = "noise", default_value_t = 0.1)]
    pub noise_scale: f64,
}

impl GenParams {
    fn spec(&self, prompt_len: usize) -> GenSpec {
        GenSpec {
            num_layers: self.layers,
            num_query_heads: self.heads,
            num_kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            prompt_len,
            post_vision_len: self.tau,
            decode_len: self.decode_len,
            seed: self.seed,
            pre_vision_len: self.pre_vision,
            heavy_fraction: self.heavy_fraction,
            noise_scale: self.noise_scale,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCmd {
    /// Prompt length.
    #[arg(long = "m")]
    pub prompt_len: usize,
    #[command(flatten)]
    pub params: GenParams,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// A trace file, or generator flags for an in-memory synthetic trace.
#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["trace", "prompt_len"])))]
pub struct TraceInput {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Prompt length of a synthetic trace.
    #[arg(long = "m")]
    pub prompt_len: Option<usize>,
    #[command(flatten)]
    pub params: GenParams,
}

impl TraceInput {
    fn load(&self) -> Result<AttentionTrace> {
        match (&self.trace, self.prompt_len) {
            (Some(path), _) => read_trace(path),
            (None, Some(m)) => Ok(generate_trace(&self.params.spec(m))?.trace),
            (None, None) => Err(Error::spec("input", "need --trace or --m")),
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Directory for output files; tables go to stdout when omitted.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long, default_value_t = 0.01)]
    pub p: f64,
    /// Rows used in place of the post-vision slice when tau = 0.
    #[arg(long)]
    pub fallback_window: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyName {
    /// Accumulated post-vision attention.
    Vlcache,
    /// Accumulated attention over every prompt row.
    H2o,
    /// Accumulated attention over the last `--window` prompt rows.
    Sliding,
    /// Initial plus most recent tokens.
    Streaming,
}

impl PolicyName {
    const ALL: [PolicyName; 4] = [Self::Vlcache, Self::H2o, Self::Sliding, Self::Streaming];

    fn label(self) -> &'static str {
        match self {
            Self::Vlcache => "vlcache",
            Self::H2o => "h2o",
            Self::Sliding => "sliding",
            Self::Streaming => "streaming",
        }
    }

    /// Policy for a layer keeping `kept_count` tokens.
    fn policy(self, window: usize, kept_count: usize) -> ScoringPolicy {
        match self {
            Self::Vlcache => ScoringPolicy::PostVision,
            Self::H2o => ScoringPolicy::AccumulatedAttention,
            Self::Sliding => ScoringPolicy::SlidingWindow { window },
            Self::Streaming => ScoringPolicy::streaming_for_budget(kept_count),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BudgetName {
    Sparsity,
    Uniform,
    Pyramid,
}

#[derive(Debug, Args)]
pub struct CompressCmd {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = PolicyName::Vlcache)]
    pub policy: PolicyName,
    #[arg(long, value_enum, default_value_t = BudgetName::Sparsity)]
    pub budget: BudgetName,
    /// Sliding-window policy width.
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub decay_ratio: f64,
    #[arg(long, default_value_t = 0.10)]
    pub recent_frac: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p: f64,
    /// Rows used in place of the post-vision slice when tau = 0.
    #[arg(long)]
    pub fallback_window: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub input: TraceInput,
    /// Policies to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = PolicyName::ALL)]
    pub policies: Vec<PolicyName>,
    /// Budgets as fractions of the prompt length, rounded up to token counts.
    #[arg(long = "k-frac", value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.4])]
    pub k_fracs: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    /// Emit one row per query head instead of head means.
    #[arg(long)]
    pub per_head: bool,
    /// Average the hit rate over every decoding row instead of the first.
    #[arg(long)]
    pub all_decoding_rows: bool,
    /// Seeds in the synthetic summary, starting at `--seed`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Coverage budget as a fraction of the sequence length.
    #[arg(long, default_value_t = 0.1)]
    pub alpha_eval: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    #[arg(long = "m", default_value_t = 2048)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Batch sizes for a latency-throughput curve; overrides `--batch`.
    #[arg(long, value_delimiter = ',')]
    pub batches: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub n_output: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = PolicyName::Vlcache)]
    pub policy: PolicyName,
    #[arg(long, value_enum, default_value_t = BudgetName::Sparsity)]
    pub budget: BudgetName,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub tau: usize,
    #[arg(long, default_value_t = 50)]
    pub stats_window: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden_dim: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) if e.is_broken_pipe() => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Thread count from `VLCACHE_THREADS`, falling back to the flag.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Error::spec("threads", format!("{THREADS_ENV}={v} is not a positive integer"))),
        _ => match flag {
            Some(0) => Err(Error::spec("threads", "must be positive")),
            other => Ok(other),
        },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = resolve_threads(cli.threads)?;
    if let Some(n) = threads {
        // A global pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Gen(c) => cmd_gen(&c),
        Command::Analyze(c) => cmd_analyze(&c),
        Command::Compress(c) => cmd_compress(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Bench(c) => cmd_bench(&c, threads),
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Writes `rows` as `<name>.csv`/`<name>.json` in `dir`, or to stdout.
fn emit_table<T: Serialize>(rows: &[T], name: &str, output: &OutputArgs) -> Result<()> {
    match (&output.out_dir, output.format) {
        (Some(dir), Format::Csv) => {
            ensure_dir(dir)?;
            let path = dir.join(format!("{name}.csv"));
            write_csv(rows, create(&path)?)
        }
        (Some(dir), Format::Json) => {
            ensure_dir(dir)?;
            write_json(&dir.join(format!("{name}.json")), &rows)
        }
        (None, Format::Csv) => write_csv(rows, io::stdout().lock()),
        (None, Format::Json) => print_json(&rows),
    }
}

/// Summary JSON to `<dir>/<name>.json`, or stderr when printing tables to stdout.
fn emit_summary<T: Serialize>(value: &T, name: &str, out_dir: Option<&Path>) -> Result<()> {
    match out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            write_json(&dir.join(format!("{name}.json")), value)
        }
        None => {
            eprintln!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn cmd_gen(c: &GenCmd) -> Result<()> {
    let g = generate_trace(&c.params.spec(c.prompt_len))?;
    write_trace(&g.trace, &c.output)?;
    #[derive(Serialize)]
    struct Printed<'a> {
        path: &'a Path,
        header: &'a crate::trace::TraceHeader,
        layout: &'a crate::trace::ModalityLayout,
        heavy_tokens: &'a [usize],
    }
    print_json(&Printed {
        path: &c.output,
        header: g.trace.header(),
        layout: g.trace.layout(),
        heavy_tokens: &g.heavy_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRow {
    pub layer: usize,
    pub head: usize,
    pub phase: String,
    pub gamma: f64,
}

pub fn sparsity_rows(s: &LayerSparsity) -> Vec<SparsityRow> {
    let mut out = Vec::with_capacity(s.gamma.len());
    for layer in 0..s.num_layers {
        for head in 0..s.num_heads {
            out.push(SparsityRow {
                layer,
                head,
                phase: s.phase.name().to_string(),
                gamma: s.get(layer, head),
            });
        }
    }
    out
}

/// Post-vision sparsity, or the fallback window when the trace has `tau = 0`.
fn budget_sparsity(trace: &AttentionTrace, cfg: &SparsityConfig, fallback: Option<usize>) -> Result<LayerSparsity> {
    match (trace.header().post_vision_len, fallback) {
        (0, Some(w)) if w > 0 => stats_window_sparsity(trace, cfg, w),
        (0, _) => Err(Error::NoPostVisionTokens),
        _ => post_vision_sparsity(trace, cfg),
    }
}

#[derive(Debug, Serialize)]
struct AnalyzeSummary {
    phases: Vec<PhaseSummary>,
    /// Pearson correlation of the head-averaged prefill and decoding curves.
    pearson_prefill_decoding: Option<f64>,
    pearson_post_vision_decoding: Option<f64>,
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct PhaseSummary {
    phase: Phase,
    layer_means: Vec<f64>,
}

fn cmd_analyze(c: &AnalyzeCmd) -> Result<()> {
    let trace = c.input.load()?;
    let cfg = SparsityConfig::with_p(c.p);
    let mut notes = vec![];
    let prefill = prefill_sparsity(&trace, &cfg)?;
    let post = match budget_sparsity(&trace, &cfg, c.fallback_window) {
        Ok(s) => Some(s),
        Err(Error::NoPostVisionTokens) => {
            notes.push("tau = 0 and no --fallback-window: post-vision phase skipped".into());
            None
        }
        Err(e) => return Err(e),
    };
    let decoding = match decoding_sparsity(&trace, &cfg) {
        Ok(s) => Some(s),
        Err(Error::NoDecodingRows) => {
            notes.push("no decoding rows: decoding phase skipped".into());
            None
        }
        Err(e) => return Err(e),
    };
    let mut similarity = |a: &LayerSparsity, b: &Option<LayerSparsity>| -> Result<Option<f64>> {
        match b {
            None => Ok(None),
            Some(b) => match curve_similarity(a, b) {
                Ok(r) => Ok(Some(r)),
                Err(Error::ZeroVariance(which)) => {
                    notes.push(format!("{} vs decoding: curve {which} is constant", a.phase.name()));
                    Ok(None)
                }
                Err(e) => Err(e),
            },
        }
    };
    let pearson_prefill_decoding = similarity(&prefill, &decoding)?;
    let pearson_post_vision_decoding = match &post {
        Some(p) => similarity(p, &decoding)?,
        None => None,
    };
    let all: Vec<&LayerSparsity> = [Some(&prefill), post.as_ref(), decoding.as_ref()].into_iter().flatten().collect();
    let rows: Vec<SparsityRow> = all.iter().flat_map(|s| sparsity_rows(s)).collect();
    emit_table(&rows, "sparsity", &c.output)?;
    let summary = AnalyzeSummary {
        phases: all
            .iter()
            .map(|s| PhaseSummary {
                phase: s.phase,
                layer_means: s.layer_means(),
            })
            .collect(),
        pearson_prefill_decoding,
        pearson_post_vision_decoding,
        notes,
    };
    emit_summary(&summary, "sparsity_summary", c.output.out_dir.as_deref())
}

fn cmd_compress(c: &CompressCmd) -> Result<()> {
    let trace = c.input.load()?;
    let (l, m) = (trace.header().num_layers, trace.prompt_len());
    let config = BudgetConfig {
        alpha: c.alpha,
        tau_fallback_window: c.fallback_window.unwrap_or(BudgetConfig::default().tau_fallback_window),
        ..BudgetConfig::default()
    };
    config.validate()?;
    let needs_window = c.budget == BudgetName::Sparsity || c.policy == PolicyName::Vlcache;
    if needs_window && trace.header().post_vision_len == 0 && c.fallback_window.is_none() {
        return Err(Error::NoPostVisionTokens);
    }
    let allocation = match c.budget {
        BudgetName::Sparsity => {
            let gamma = budget_sparsity(&trace, &SparsityConfig::with_p(c.p), c.fallback_window)?;
            allocate_sparsity_aware(&gamma.layer_means(), m, &config)?
        }
        BudgetName::Uniform => allocate_uniform(l, m, c.alpha)?,
        BudgetName::Pyramid => allocate_pyramid(l, m, c.decay_ratio, &config)?,
    };
    let source = StatsSource {
        p: c.p,
        fallback_window: c.fallback_window,
        ..StatsSource::default()
    };
    let eviction = EvictionConfig {
        recent_window_frac: c.recent_frac,
    };
    let (policy, window) = (c.policy, c.window);
    let compressed = compress_cache_with(&trace, &allocation, |_, k| policy.policy(window, k), &eviction, &source)?;
    ensure_dir(&c.out_dir)?;
    let report = allocation.report();
    write_json(&c.out_dir.join("allocation.json"), &report)?;
    write_json(&c.out_dir.join("kept_sets.json"), &compressed.kept.records())?;
    writeln!(
        io::stdout().lock(),
        "{} / {} budget: requested {:.4}, realized {:.4} (alpha * L vs sum of clipped beta); kept {} of {} tokens",
        c.policy.label(),
        match allocation.method {
            AllocationMethod::SparsityAware => "sparsity",
            AllocationMethod::Uniform => "uniform",
            AllocationMethod::Pyramid => "pyramid",
        },
        report.requested_total,
        report.realized_total,
        compressed.kept.total_retained(),
        l * trace.header().num_kv_heads * m,
    )
    .map_err(|e| Error::io("<stdout>", e))
}

/// Token budget for a fraction of the prompt, clamped to `[1, m]`.
fn budget_tokens(frac: f64, m: usize) -> usize {
    ((frac * m as f64 - 1e-9).ceil().max(1.0) as usize).min(m)
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    k: usize,
    seeds: Vec<u64>,
    policies: Vec<PolicyMean>,
}

#[derive(Debug, Serialize)]
struct PolicyMean {
    policy: String,
    /// Mean over seeds, layers and query heads.
    mean_hit_rate: f64,
}

fn named_policies(names: &[PolicyName], window: usize) -> Vec<(String, ScoringPolicy)> {
    names
        .iter()
        .map(|p| (p.label().to_string(), p.policy(window, 1)))
        .collect()
}

fn mean_hit_rates(trace: &AttentionTrace, names: &[PolicyName], window: usize, k: usize, rows: OracleRows) -> Result<Vec<f64>> {
    let policies = named_policies(names, window);
    let sweep = hit_rate_sweep(trace, &policies, &[k], &StatsSource::default(), rows)?;
    Ok(policies
        .iter()
        .map(|(name, _)| {
            let hits: Vec<f64> = sweep.iter().filter(|r| &r.policy == name).map(|r| r.hit_rate).collect();
            hits.iter().sum::<f64>() / hits.len() as f64
        })
        .collect())
}

fn cmd_eval(c: &EvalCmd) -> Result<()> {
    let trace = c.input.load()?;
    let m = trace.prompt_len();
    let rows = if c.all_decoding_rows {
        OracleRows::AllDecoding
    } else {
        OracleRows::First
    };
    let mut ks: Vec<usize> = c.k_fracs.iter().map(|&f| budget_tokens(f, m)).collect();
    ks.dedup();
    let policies = named_policies(&c.policies, c.window);
    let mut table = hit_rate_sweep(&trace, &policies, &ks, &StatsSource::default(), rows)?;
    if !c.per_head {
        table = mean_over_heads(&table);
    }
    emit_table(&table, "hit_rate", &c.output)?;

    let window = EvalWindow::decoding(&trace, c.alpha_eval)?;
    let modality = modality_stats(&trace, &window, c.p)?;
    if let Some(dir) = &c.output.out_dir {
        ensure_dir(dir)?;
        write_csv(&modality, create(&dir.join("modality.csv"))?)?;
    }

    let k = budget_tokens(0.1, m);
    let (seeds, sums) = match (&c.input.trace, c.input.prompt_len) {
        (None, Some(prompt_len)) => {
            let seeds: Vec<u64> = (0..c.seeds).map(|i| c.input.params.seed + i).collect();
            let mut sums = vec![0.0; c.policies.len()];
            for &seed in &seeds {
                let spec = GenSpec {
                    seed,
                    ..c.input.params.spec(prompt_len)
                };
                let t = generate_trace(&spec)?.trace;
                for (s, v) in sums.iter_mut().zip(mean_hit_rates(&t, &c.policies, c.window, k, rows)?) {
                    *s += v;
                }
            }
            (seeds, sums)
        }
        _ => (vec![trace.header().seed], mean_hit_rates(&trace, &c.policies, c.window, k, rows)?),
    };
    let n = seeds.len() as f64;
    let summary = EvalSummary {
        k,
        policies: c
            .policies
            .iter()
            .zip(&sums)
            .map(|(p, s)| PolicyMean {
                policy: p.label().to_string(),
                mean_hit_rate: s / n,
            })
            .collect(),
        seeds,
    };
    emit_summary(&summary, "eval_summary", c.output.out_dir.as_deref())
}

fn cmd_bench(c: &BenchCmd, threads: Option<usize>) -> Result<()> {
    let base = BenchSpec {
        prompt_len: c.prompt_len,
        batch_size: c.batch,
        n_output_tokens: c.n_output,
        alpha: c.alpha,
        policy: c.policy.policy(c.window, 1),
        budget: match c.budget {
            BudgetName::Sparsity => AllocationMethod::SparsityAware,
            BudgetName::Uniform => AllocationMethod::Uniform,
            BudgetName::Pyramid => return Err(Error::spec("budget", "bench supports sparsity or uniform")),
        },
        repeats: c.repeats,
        warmup: c.warmup,
        seed: c.seed,
        post_vision_len: c.tau,
        stats_window: c.stats_window,
        threads,
        model: BenchModel {
            num_layers: c.layers,
            num_query_heads: c.heads,
            num_kv_heads: c.kv_heads,
            head_dim: c.head_dim,
            hidden_dim: c.hidden_dim,
            ..BenchModel::default()
        },
        ..BenchSpec::default()
    };
    if c.policy == PolicyName::Streaming {
        return Err(Error::spec("policy", "bench scores with attention-based policies only"));
    }
    if c.batches.is_empty() {
        let report = run_bench(&base)?;
        match &c.out_dir {
            Some(dir) => {
                ensure_dir(dir)?;
                write_json(&dir.join("bench.json"), &report)
            }
            None => print_json(&report),
        }
    } else {
        let specs: Vec<BenchSpec> = c
            .batches
            .iter()
            .map(|&b| BenchSpec {
                batch_size: b,
                ..base.clone()
            })
            .collect();
        let curve = latency_throughput_curve(&specs)?;
        match &c.out_dir {
            Some(dir) => {
                ensure_dir(dir)?;
                write_curve_csv(&curve, create(&dir.join("curve.csv"))?)
            }
            None => write_curve_csv(&curve, io::stdout().lock()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_required_flag_is_usage_error() {
        assert_eq!(main_with_args(["vlcache", "gen", "--m", "64"]), 2);
        assert_eq!(main_with_args(["vlcache", "analyze"]), 2);
        assert_eq!(main_with_args(["vlcache", "frobnicate"]), 2);
    }

    #[test]
    fn budget_tokens_rounds_up() {
        assert_eq!(budget_tokens(0.1, 256), 26);
        assert_eq!(budget_tokens(0.1, 100), 10);
        assert_eq!(budget_tokens(0.0001, 100), 1);
    }

    #[test]
    fn sparsity_rows_shape() {
        let t = crate::test_support::random_trace(1, 32);
        let rows = sparsity_rows(&prefill_sparsity(&t, &SparsityConfig::default()).unwrap());
        assert_eq!(rows.len(), 2 * 4);
        assert!(rows.iter().all(|r| r.phase == "prefill" && (0.0..=1.0).contains(&r.gamma)));
    }
}
