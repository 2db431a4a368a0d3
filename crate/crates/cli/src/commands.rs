//! The five subcommands. Each returns a serializable summary; the binary
//! prints it as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memstream_core::analysis::{
    entropy_histogram, recall_at_k, score_trace, self_similarity, summarize_recalls, AnalysisReport, LayerSimilarity,
    QuestionRecall,
};
use memstream_core::encoder::{encode_stream, EncodeTrace};
use memstream_core::kv_store::{
    kv_cache_bytes, load_cache, save_cache, Grid, MemoryUsage, StoreConfig, TieredCacheStore,
};
use memstream_core::numerics::Matrix;
use memstream_core::retrieval::{answer_attention, expert_scores, retrieve, RetrievalMode};
use memstream_core::toy_model::{
    gen_benchmark, random_clue_spec, BenchmarkSpec, TokenSchedule, ToyModel, ToyModelConfig, SEPARABLE_MARGIN,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::manifest::{ExternalEntry, FrameEntry, QuestionEntry, StreamManifest, ValidatedManifest};
use crate::tensor::Tensor;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn matrix_digest(ms: &[Matrix]) -> String {
    let mut h = Sha256::new();
    for m in ms {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub frames: usize,
    pub questions: usize,
    pub clue_len: usize,
    pub margin: f32,
    pub redundancy: f32,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub grid: Grid,
    pub input_dim: usize,
    pub external_dim: usize,
    pub question_tokens: usize,
    pub temporal_patch: usize,
    pub seed: u64,
}

impl Default for GenArgs {
    fn default() -> Self {
        Self {
            frames: 200,
            questions: 8,
            clue_len: 4,
            margin: SEPARABLE_MARGIN,
            redundancy: 0.9,
            layers: 4,
            heads: 2,
            head_dim: 32,
            grid: Grid::new(4, 4),
            input_dim: 32,
            external_dim: 32,
            question_tokens: 4,
            temporal_patch: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub frames: usize,
    pub questions: usize,
    pub layers: usize,
    pub seed: u64,
}

/// Writes a seeded synthetic benchmark: `manifest.json` plus tensors under
/// `frames/`, `questions/` and `external/`.
pub fn gen(args: &GenArgs, out: &Path) -> Result<GenSummary> {
    let model_config = ToyModelConfig {
        layers: args.layers,
        heads: args.heads,
        head_dim: args.head_dim,
        tokens: TokenSchedule::Fixed(args.grid),
        input_dim: args.input_dim,
        external_dim: args.external_dim,
        question_tokens: args.question_tokens,
        seed: args.seed,
    };
    if args.temporal_patch == 0 {
        bail!("temporal patch must be >= 1");
    }
    let model = ToyModel::new(model_config.clone())?;
    let clues = if args.frames == 0 || args.questions == 0 {
        Vec::new()
    } else {
        random_clue_spec(args.frames, args.questions, args.clue_len, args.seed)?
    };
    let bench = if args.frames == 0 {
        None
    } else {
        Some(gen_benchmark(&BenchmarkSpec {
            frames: args.frames,
            clues,
            margin: args.margin,
            redundancy: args.redundancy,
            input_dim: args.input_dim,
            seed: args.seed,
        })?)
    };
    for sub in ["frames", "questions", "external"] {
        create_dir(&out.join(sub))?;
    }
    let mut frames = Vec::new();
    let mut questions = Vec::new();
    let mut external = None;
    if let Some(bench) = &bench {
        let mut ext_rows = Vec::with_capacity(bench.features.len());
        for (t, f) in bench.features.iter().enumerate() {
            let rel = PathBuf::from(format!("frames/f{t:06}.mstn"));
            Tensor::vector(f.clone()).write(&out.join(&rel))?;
            ext_rows.push(model.external_encode(f)?);
            frames.push(FrameEntry {
                index: t,
                grid: [args.grid.height, args.grid.width],
                input: Some(rel),
                qkv: None,
            });
        }
        let mut ext_questions = Vec::with_capacity(bench.questions.len());
        for q in &bench.questions {
            let rel = PathBuf::from(format!("questions/{}.mstn", q.id));
            Tensor::vector(q.concept.clone()).write(&out.join(&rel))?;
            ext_questions.push(model.external_encode(&q.concept)?);
            questions.push(QuestionEntry {
                id: q.id.clone(),
                concept: Some(rel),
                features: None,
                clue_frames: q.clue.frames.iter().map(|f| f * args.temporal_patch).collect(),
            });
        }
        let flat = |rows: &[Vec<f32>]| rows.iter().flatten().copied().collect::<Vec<f32>>();
        let e = args.external_dim as u64;
        Tensor::new(vec![ext_rows.len() as u64, e], flat(&ext_rows))?.write(&out.join("external/frames.mstn"))?;
        Tensor::new(vec![ext_questions.len() as u64, e], flat(&ext_questions))?
            .write(&out.join("external/questions.mstn"))?;
        external = Some(ExternalEntry {
            name: "toy-external".into(),
            frame_embeddings: "external/frames.mstn".into(),
            question_embeddings: "external/questions.mstn".into(),
        });
    }
    let manifest = StreamManifest {
        video_id: format!("toy-{}", args.seed),
        temporal_patch: args.temporal_patch,
        model: Some(model_config),
        dims: None,
        frames,
        questions,
        external,
    };
    let path = out.join("manifest.json");
    manifest.write(&path)?;
    Ok(GenSummary {
        manifest: path,
        frames: manifest.frames.len(),
        questions: manifest.questions.len(),
        layers: args.layers,
        seed: args.seed,
    })
}

// ---------------------------------------------------------------- encode

#[derive(Debug, Serialize)]
pub struct EncodeSummary {
    pub video_id: String,
    pub cache: PathBuf,
    pub trace: PathBuf,
    pub frames: usize,
    pub layers: usize,
    pub strategy: String,
    pub config_hash: String,
    pub full_window_tokens: usize,
    pub attended_window_tokens: usize,
    pub compression_rate: Option<f64>,
    pub cache_bytes: u64,
    /// Digest of every per-frame, per-layer window-attention output.
    pub output_digest: String,
    /// Store footprint after the final flush.
    pub memory: MemoryUsage,
    pub warnings: Vec<String>,
}

/// Where `encode` puts the trace for a given cache path.
pub fn trace_path(cache: &Path) -> PathBuf {
    cache.with_extension("trace.json")
}

pub fn encode(manifest_path: &Path, config: &RunConfig, cache: &Path) -> Result<EncodeSummary> {
    let manifest = ValidatedManifest::open(manifest_path)?;
    let mut warnings = Vec::new();
    if manifest.frame_count() == 0 {
        warnings.push(format!(
            "manifest {} has no frames; writing an empty cache",
            manifest_path.display()
        ));
    }
    let spill_default = cache
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
        .join(".memstream-spill");
    let mut store = TieredCacheStore::new(StoreConfig {
        layer_count: manifest.dims.layers,
        head_count: manifest.dims.heads,
        head_dim: manifest.dims.head_dim,
        capacity: config.window,
        spill: config.spill_policy(&spill_default),
    })?;
    let mut trace = EncodeTrace::default();
    let mut digest = Sha256::new();
    encode_stream(manifest.frames(), &mut store, config.strategy, &mut trace, |t, out| {
        digest.update((t as u64).to_le_bytes());
        digest.update(matrix_digest(&out).as_bytes());
    })?;

    if let Some(parent) = cache.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_cache(&store, cache)?;
    let memory = store.memory();
    // Dropping the store removes its spill session; the base directory goes
    // too if nothing else lives there.
    drop(store);
    let _ = fs::remove_dir(&spill_default);
    let trace_file = trace_path(cache);
    write_file(&trace_file, serde_json::to_vec_pretty(&trace)?)?;
    Ok(EncodeSummary {
        video_id: manifest.manifest.video_id.clone(),
        cache: cache.to_path_buf(),
        trace: trace_file,
        frames: manifest.frame_count(),
        layers: manifest.dims.layers,
        strategy: config.strategy.to_string(),
        config_hash: config.hash(),
        full_window_tokens: trace.full_window_tokens(),
        attended_window_tokens: trace.attended_window_tokens(),
        compression_rate: trace.compression_rate(),
        cache_bytes: fs::metadata(cache)?.len(),
        output_digest: hex::encode(digest.finalize()),
        memory,
        warnings,
    })
}

// ---------------------------------------------------------------- query

#[derive(Debug, Serialize)]
pub struct LayerAnswer {
    pub layer: usize,
    /// Retrieved frame indices, ascending.
    pub frames: Vec<usize>,
    /// Score of each retrieved frame, same order.
    pub scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    pub answer_rows: usize,
    pub answer_cols: usize,
    pub answer_digest: String,
}

#[derive(Debug, Serialize)]
pub struct QueryAnswer {
    pub question_id: String,
    pub mode: RetrievalMode,
    pub fusion: memstream_core::retrieval::Fusion,
    pub budget: usize,
    pub layers: Vec<LayerAnswer>,
}

fn open_pair(cache: &Path, manifest: &Path) -> Result<(TieredCacheStore, ValidatedManifest)> {
    let manifest = ValidatedManifest::open(manifest)?;
    let store = load_cache(cache).with_context(|| format!("loading cache {}", cache.display()))?;
    let d = manifest.dims;
    if (store.layer_count(), store.head_count(), store.head_dim()) != (d.layers, d.heads, d.head_dim)
        || store.frame_count() != manifest.frame_count()
    {
        bail!(
            "cache ({} layers, {}×{} heads, {} frames) does not match manifest ({} layers, {}×{} heads, {} frames)",
            store.layer_count(),
            store.head_count(),
            store.head_dim(),
            store.frame_count(),
            d.layers,
            d.heads,
            d.head_dim,
            manifest.frame_count()
        );
    }
    Ok((store, manifest))
}

/// Retrieves and answers the given questions, or all of them when `ids` is empty.
pub fn query(cache: &Path, manifest_path: &Path, config: &RunConfig, ids: &[String]) -> Result<Vec<QueryAnswer>> {
    let (store, manifest) = open_pair(cache, manifest_path)?;
    let external = manifest.external()?;
    let cfg = config.retrieval();
    let ids: Vec<String> = if ids.is_empty() {
        manifest.manifest.questions.iter().map(|q| q.id.clone()).collect()
    } else {
        ids.to_vec()
    };
    let mut answers = Vec::with_capacity(ids.len());
    for id in &ids {
        let features = manifest.question(id)?;
        let clue = manifest.clues().iter().find(|c| &c.question_id == id);
        let result = retrieve(&store, external.as_ref(), &features, &cfg)?;
        let outputs = answer_attention(&store, &features, &result)?;
        let layers = result
            .layers
            .iter()
            .zip(&outputs)
            .map(|(l, out)| {
                Ok(LayerAnswer {
                    layer: l.layer,
                    scores: l.frames.iter().map(|&f| l.scores[f]).collect(),
                    recall: clue.map(|c| recall_at_k(&l.frames, &c.frames)).transpose()?,
                    frames: l.frames.clone(),
                    answer_rows: out.rows(),
                    answer_cols: out.cols(),
                    answer_digest: matrix_digest(std::slice::from_ref(out)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        answers.push(QueryAnswer {
            question_id: id.clone(),
            mode: result.mode,
            fusion: result.fusion,
            budget: cfg.budget,
            layers,
        });
    }
    Ok(answers)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub report: PathBuf,
    pub recall_csv: PathBuf,
    pub layer_csv: PathBuf,
    pub questions: usize,
    pub mean_recall: f64,
}

/// First, middle and last layer, deduplicated.
fn default_similarity_layers(layers: usize) -> Vec<usize> {
    let mut v = vec![0, layers / 2, layers - 1];
    v.dedup();
    v
}

pub fn build_report(
    store: &TieredCacheStore,
    manifest: &ValidatedManifest,
    config: &RunConfig,
    trace: Option<&EncodeTrace>,
) -> Result<AnalysisReport> {
    let external = manifest.external()?;
    let cfg = config.retrieval();
    let layers = store.layer_count();
    let selected = if config.similarity_layers.is_empty() {
        default_similarity_layers(layers)
    } else {
        config.similarity_layers.clone()
    };
    if let Some(&bad) = selected.iter().find(|&&l| l >= layers) {
        bail!("similarity layer {bad} out of range (cache has {layers} layers)");
    }

    let mut recalls = Vec::new();
    let mut traces = Vec::new();
    for clue in manifest.clues() {
        let features = manifest.question(&clue.question_id)?;
        let result = retrieve(store, external.as_ref(), &features, &cfg)?;
        let per_layer = result
            .layers
            .iter()
            .map(|l| recall_at_k(&l.frames, &clue.frames))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        recalls.push(QuestionRecall::new(clue.question_id.clone(), per_layer));

        let trace_mode = if external.is_some() {
            RetrievalMode::Moe
        } else {
            RetrievalMode::Internal
        };
        let scores = expert_scores(store, external.as_ref(), &features, trace_mode)?;
        if let Some(internal) = &scores.internal {
            for &l in &selected {
                traces.push(score_trace(&format!("layer{l}"), &internal[l], clue));
            }
        }
        if let Some(ext) = &scores.external {
            traces.push(score_trace("external", ext, clue));
        }
    }
    let mut report = summarize_recalls(cfg.budget, recalls)?;
    report.score_traces = traces;
    if store.frame_count() > 0 {
        for &l in &selected {
            let m = self_similarity(&store.rep_matrix(l)?)?;
            report.similarity.push(LayerSimilarity {
                layer: l,
                matrix: m.row_iter().map(<[f32]>::to_vec).collect(),
            });
        }
    }
    if let Some(trace) = trace.filter(|t| t.entropies().next().is_some()) {
        report.entropy_histogram = Some(entropy_histogram(trace, config.entropy_bins)?);
    }
    Ok(report)
}

pub fn recall_csv(report: &AnalysisReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["question_id", "layer", "recall"])?;
    for q in &report.questions {
        for (l, r) in q.per_layer.iter().enumerate() {
            w.write_record([q.question_id.clone(), l.to_string(), r.to_string()])?;
        }
    }
    Ok(w.into_inner()?)
}

pub fn layer_csv(report: &AnalysisReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "count", "mean", "median", "q1", "q3", "min", "max"])?;
    for s in &report.layer_recall {
        w.write_record([
            s.layer.to_string(),
            s.count.to_string(),
            s.mean.to_string(),
            s.median.to_string(),
            s.q1.to_string(),
            s.q3.to_string(),
            s.min.to_string(),
            s.max.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Sweeps every annotated question and writes `report-<hash>.json`,
/// `recall-<hash>.csv` and `layers-<hash>.csv` into `out`.
pub fn eval(cache: &Path, manifest_path: &Path, config: &RunConfig, out: &Path) -> Result<EvalSummary> {
    let (store, manifest) = open_pair(cache, manifest_path)?;
    let trace_file = trace_path(cache);
    let trace: Option<EncodeTrace> = if trace_file.exists() {
        let text = fs::read_to_string(&trace_file).with_context(|| format!("reading {}", trace_file.display()))?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", trace_file.display()))?)
    } else {
        None
    };
    let report = build_report(&store, &manifest, config, trace.as_ref())?;

    create_dir(out)?;
    let hash = config.hash();
    let summary = EvalSummary {
        report: out.join(format!("report-{hash}.json")),
        recall_csv: out.join(format!("recall-{hash}.csv")),
        layer_csv: out.join(format!("layers-{hash}.csv")),
        questions: report.questions.len(),
        mean_recall: report.mean_recall_joint,
        config_hash: hash,
    };
    write_file(&summary.report, serde_json::to_vec_pretty(&report)?)?;
    write_file(&summary.recall_csv, recall_csv(&report)?)?;
    write_file(&summary.layer_csv, layer_csv(&report)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- memsize

#[derive(Debug, Serialize, PartialEq)]
pub struct MemSize {
    pub layers: u64,
    pub frames: u64,
    pub tokens_per_frame: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub bytes_per_elem: u64,
    pub bytes: u64,
    pub human: String,
}

pub fn memsize(
    layers: u64,
    frames: u64,
    tokens: u64,
    heads: u64,
    head_dim: u64,
    bytes_per_elem: u64,
) -> Result<MemSize> {
    let bytes = kv_cache_bytes(layers, frames, tokens, heads, head_dim, bytes_per_elem)?;
    Ok(MemSize {
        layers,
        frames,
        tokens_per_frame: tokens,
        heads,
        head_dim,
        bytes_per_elem,
        bytes,
        human: format!(
            "{:.1} GB ({:.2} GiB)",
            bytes as f64 / 1e9,
            bytes as f64 / (1u64 << 30) as f64
        ),
    })
}
