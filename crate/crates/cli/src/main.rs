use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use memstream_cli::commands::{self, GenArgs};
use memstream_cli::config::{Overrides, RunConfig};
use memstream_core::encoder::CompressionStrategy;
use memstream_core::kv_store::Grid;
use memstream_core::retrieval::{Fusion, RetrievalMode};
use serde::Serialize;

/// Streaming KV-cache memory engine.
#[derive(Debug, Parser)]
#[command(name = "memstream", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Stream manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Cache file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// full, pool:K, dilated:K, uniform:K, tome:R, kmeans:K, temporal:K, aks[:K|:1/C|:rX]
    #[arg(long, global = true)]
    strategy: Option<CompressionStrategy>,
    #[arg(long, global = true)]
    mode: Option<RetrievalMode>,
    #[arg(long, global = true)]
    fusion: Option<Fusion>,
    #[arg(long = "rrf-k", global = true)]
    rrf_k: Option<f64>,
    /// Frames retrieved per layer.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Hot-window capacity in full tokens.
    #[arg(long = "window-tokens", global = true)]
    window_tokens: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic benchmark (manifest plus tensors).
    Gen(GenOpts),
    /// Encode a manifest's stream into a cache file and trace.
    Encode,
    /// Retrieve frames and answer attention for questions.
    Query {
        /// Question ids; all questions when omitted.
        #[arg(long = "question")]
        questions: Vec<String>,
    },
    /// Recall, score traces, similarity and entropy reports.
    Eval,
    /// KV-cache size `2·L·T·M·H·D·bytes`.
    Memsize {
        layers: u64,
        frames: u64,
        tokens_per_frame: u64,
        heads: u64,
        head_dim: u64,
        #[arg(default_value_t = 2)]
        bytes_per_elem: u64,
    },
}

#[derive(Debug, Args)]
struct GenOpts {
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    questions: usize,
    #[arg(long = "clue-len", default_value_t = 4)]
    clue_len: usize,
    #[arg(long, default_value_t = memstream_core::toy_model::SEPARABLE_MARGIN)]
    margin: f32,
    #[arg(long, default_value_t = 0.9)]
    redundancy: f32,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long = "head-dim", default_value_t = 32)]
    head_dim: usize,
    /// Token grid as HxW.
    #[arg(long, default_value = "4x4", value_parser = parse_grid)]
    grid: Grid,
    #[arg(long = "input-dim", default_value_t = 32)]
    input_dim: usize,
    #[arg(long = "external-dim", default_value_t = 32)]
    external_dim: usize,
    #[arg(long = "question-tokens", default_value_t = 4)]
    question_tokens: usize,
    #[arg(long = "temporal-patch", default_value_t = 2)]
    temporal_patch: usize,
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok(Grid::new(parse(h)?, parse(w)?))
}

fn required(opt: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    opt.clone().with_context(|| format!("--{flag} is required"))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // A closed pipe (`| head`) is the reader's choice, not a failure.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let overrides = Overrides {
        seed: g.seed,
        strategy: g.strategy,
        mode: g.mode,
        fusion: g.fusion,
        rrf_k: g.rrf_k,
        budget: g.budget,
        window_tokens: g.window_tokens,
    };
    match cli.command {
        Command::Gen(o) => {
            let out = required(&g.out, "out")?;
            let seed = match (g.seed, &g.config) {
                (Some(s), _) => s,
                (None, Some(_)) => RunConfig::load(g.config.as_deref(), &overrides)?.seed,
                (None, None) => 0,
            };
            let args = GenArgs {
                frames: o.frames,
                questions: o.questions,
                clue_len: o.clue_len,
                margin: o.margin,
                redundancy: o.redundancy,
                layers: o.layers,
                heads: o.heads,
                head_dim: o.head_dim,
                grid: o.grid,
                input_dim: o.input_dim,
                external_dim: o.external_dim,
                question_tokens: o.question_tokens,
                temporal_patch: o.temporal_patch,
                seed,
            };
            print_json(&commands::gen(&args, &out)?)
        }
        Command::Encode => {
            let config = RunConfig::load(g.config.as_deref(), &overrides)?;
            let manifest = required(&g.manifest, "manifest")?;
            let cache = match (&g.cache, &g.out) {
                (Some(c), _) => c.clone(),
                (None, Some(out)) => out.join("cache.mskv"),
                (None, None) => anyhow::bail!("--cache or --out is required"),
            };
            let summary = commands::encode(&manifest, &config, &cache)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&summary)
        }
        Command::Query { questions } => {
            let config = RunConfig::load(g.config.as_deref(), &overrides)?;
            let answers = commands::query(
                &required(&g.cache, "cache")?,
                &required(&g.manifest, "manifest")?,
                &config,
                &questions,
            )?;
            print_json(&answers)
        }
        Command::Eval => {
            let config = RunConfig::load(g.config.as_deref(), &overrides)?;
            let summary = commands::eval(
                &required(&g.cache, "cache")?,
                &required(&g.manifest, "manifest")?,
                &config,
                &required(&g.out, "out")?,
            )?;
            print_json(&summary)
        }
        Command::Memsize {
            layers,
            frames,
            tokens_per_frame,
            heads,
            head_dim,
            bytes_per_elem,
        } => {
            let m = commands::memsize(layers, frames, tokens_per_frame, heads, head_dim, bytes_per_elem)?;
            eprintln!("{} bytes ({})", m.bytes, m.human);
            print_json(&m)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match &cli.command {
        Command::Gen(_) => "gen",
        Command::Encode => "encode",
        Command::Query { .. } => "query",
        Command::Eval => "eval",
        Command::Memsize { .. } => "memsize",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            let body = serde_json::json!({
                "error": { "command": command, "message": chain.join(": "), "causes": chain }
            });
            let _ = writeln!(std::io::stdout(), "{body}");
            ExitCode::FAILURE
        }
    }
}
