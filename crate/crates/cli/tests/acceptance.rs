//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

// Oracles index explicitly on purpose.
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use memstream_core::analysis::{entropy_histogram, recall_at_k, self_similarity};
use memstream_core::encoder::{
    aks_select, encode_stream, window_attention, CompressionStrategy, EncodeTrace, FrameInput, LayerQkv, TokenKeep,
};
use memstream_core::kv_store::{
    encode_cache, load_cache, save_cache, Grid, SpillPolicy, StoreConfig, TieredCacheStore, WindowCapacity,
};
use memstream_core::numerics::{normalized_entropy, Matrix};
use memstream_core::retrieval::{
    expert_scores, rank_and_select, retrieve, rrf_fuse, Expert, ExternalEmbeddings, QuestionFeatures, Ranking,
    RetrievalConfig, RetrievalMode,
};
use memstream_core::toy_model::{
    gen_benchmark, random_clue_spec, BenchmarkSpec, TokenSchedule, ToyModel, ToyModelConfig, SEPARABLE_MARGIN,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_memstream");

// ------------------------------------------------------------------ helpers

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng, index: usize, grid: Grid, layers: usize, width: usize) -> FrameInput {
    FrameInput {
        frame_index: index,
        grid,
        layers: (0..layers)
            .map(|_| LayerQkv {
                queries: random_matrix(rng, grid.tokens(), width),
                keys: random_matrix(rng, grid.tokens(), width),
                values: random_matrix(rng, grid.tokens(), width),
            })
            .collect(),
    }
}

fn store(
    layers: usize,
    heads: usize,
    head_dim: usize,
    capacity: WindowCapacity,
    spill: Option<SpillPolicy>,
) -> TieredCacheStore {
    TieredCacheStore::new(StoreConfig {
        layer_count: layers,
        head_count: heads,
        head_dim,
        capacity,
        spill,
    })
    .unwrap()
}

/// Encodes `frames`, returning the store, trace and per-frame outputs.
fn run_encode(
    frames: &[FrameInput],
    mut store: TieredCacheStore,
    strategy: CompressionStrategy,
) -> Result<(TieredCacheStore, EncodeTrace, Vec<Vec<Matrix>>)> {
    let mut trace = EncodeTrace::default();
    let mut outputs = Vec::new();
    encode_stream(
        frames.iter().cloned().map(Ok),
        &mut store,
        strategy,
        &mut trace,
        |_, o| outputs.push(o),
    )?;
    Ok((store, trace, outputs))
}

fn cli(args: &[&str], envs: &[(&str, &Path)]) -> Result<(String, String)> {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().context("spawning memstream")?;
    let stdout = String::from_utf8(out.stdout)?;
    let stderr = String::from_utf8(out.stderr)?;
    ensure!(out.status.success(), "memstream {args:?} failed: {stdout} {stderr}");
    Ok((stdout, stderr))
}

// ------------------------------------------------------------------ 1

fn memory_formula() -> Result<String> {
    let start = Instant::now();
    let mut seen = Vec::new();
    for (m, expected) in [("256", 13_212_057_600u64), ("200", 10_321_920_000)] {
        let (stdout, _) = cli(&["memsize", "28", "900", m, "4", "128", "2"], &[])?;
        let v: serde_json::Value = serde_json::from_str(&stdout)?;
        let bytes = v["bytes"].as_u64().ok_or_else(|| anyhow!("no bytes field"))?;
        ensure!(bytes == expected, "M={m}: {bytes} != {expected}");
        seen.push(format!("{} ({})", bytes, v["human"].as_str().unwrap_or("")));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(seen.join(", "))
}

// ------------------------------------------------------------------ 2

/// Dense per-head attention of frame `t` over the window frames then itself.
fn oracle_output(frames: &[FrameInput], window: &[usize], t: usize, layer: usize, heads: usize, d: usize) -> Vec<f64> {
    let cur = &frames[t].layers[layer];
    let mut keys: Vec<&[f32]> = Vec::new();
    let mut values: Vec<&[f32]> = Vec::new();
    for &w in window.iter().chain(std::iter::once(&t)) {
        let l = &frames[w].layers[layer];
        keys.extend(l.keys.row_iter());
        values.extend(l.values.row_iter());
    }
    let width = heads * d;
    let mut out = vec![0.0f64; cur.queries.rows() * width];
    for i in 0..cur.queries.rows() {
        let q = cur.queries.row(i);
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| {
                    let mut s = 0.0f64;
                    for c in cols.clone() {
                        s += q[c] as f64 * k[c] as f64;
                    }
                    s / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (l, v) in logits.iter().zip(&values) {
                let p = (l - m).exp() / z;
                for c in cols.clone() {
                    out[i * width + c] += p * v[c] as f64;
                }
            }
        }
    }
    out
}

/// Window of frame `t`: the newest earlier frames that fit the capacity.
fn oracle_window(grids: &[Grid], t: usize, capacity: WindowCapacity) -> Vec<usize> {
    let mut window = Vec::new();
    let mut tokens = 0;
    for w in (0..t).rev() {
        let fits = match capacity {
            WindowCapacity::Frames(n) => window.len() < n,
            WindowCapacity::Tokens(n) => tokens + grids[w].tokens() <= n,
        };
        if !fits {
            break;
        }
        tokens += grids[w].tokens();
        window.push(w);
    }
    window.reverse();
    window
}

fn oracle_attention() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0A77);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let t_len = rng.gen_range(1..=12);
        let layers = rng.gen_range(1..=3);
        let heads = rng.gen_range(1..=2);
        let d = rng.gen_range(1..=4);
        let capacity = if case % 2 == 0 {
            WindowCapacity::Frames(rng.gen_range(1..=5))
        } else {
            WindowCapacity::Tokens(rng.gen_range(1..=48))
        };
        let grids: Vec<Grid> = (0..t_len)
            .map(|_| Grid::new(rng.gen_range(1..=4), rng.gen_range(1..=4)))
            .collect();
        let frames: Vec<FrameInput> = grids
            .iter()
            .enumerate()
            .map(|(t, &g)| random_frame(&mut rng, t, g, layers, heads * d))
            .collect();
        let (_, trace, outputs) = run_encode(
            &frames,
            store(layers, heads, d, capacity, None),
            CompressionStrategy::Full,
        )?;
        ensure!(
            trace.records.len() == t_len * layers,
            "case {case}: trace has {} records",
            trace.records.len()
        );
        for t in 0..t_len {
            let window = oracle_window(&grids, t, capacity);
            for layer in 0..layers {
                let expected = oracle_output(&frames, &window, t, layer, heads, d);
                let got = outputs[t][layer].data();
                ensure!(got.len() == expected.len(), "case {case}: output shape");
                for (g, e) in got.iter().zip(&expected) {
                    worst = worst.max((*g as f64 - e).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-5, "max abs diff {worst:e}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("200 cases, max abs diff {worst:.2e}, {elapsed:.2?}"))
}

// ------------------------------------------------------------------ 3

fn storage_separation() -> Result<String> {
    let strategies = [
        CompressionStrategy::Pool { kernel: 2 },
        CompressionStrategy::Dilated { stride: 2 },
        CompressionStrategy::UniformFrames { keep: 2 },
        CompressionStrategy::TokenMerge { merges: 1 },
        CompressionStrategy::KmeansFrames { centroids: 2 },
        CompressionStrategy::TemporalChange { keep: 2 },
        CompressionStrategy::Aks {
            keep: TokenKeep::Ratio(0.25),
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E9A);
    let mut compared = 0;
    for case in 0..50 {
        let t_len = rng.gen_range(1..=12);
        let layers = rng.gen_range(1..=3);
        let heads = rng.gen_range(1..=2);
        let d = rng.gen_range(1..=4);
        let capacity = WindowCapacity::Frames(rng.gen_range(1..=6));
        let frames: Vec<FrameInput> = (0..t_len)
            .map(|t| {
                let g = Grid::new(rng.gen_range(1..=4), rng.gen_range(2..=4));
                random_frame(&mut rng, t, g, layers, heads * d)
            })
            .collect();
        let (full, _, _) = run_encode(
            &frames,
            store(layers, heads, d, capacity, None),
            CompressionStrategy::Full,
        )?;
        let reference = encode_cache(&full)?;
        for s in strategies {
            let (st, trace, _) = run_encode(&frames, store(layers, heads, d, capacity, None), s)?;
            ensure!(
                encode_cache(&st)? == reference,
                "case {case}: {s} cache differs from full"
            );
            ensure!(
                trace
                    .records
                    .iter()
                    .all(|r| r.attended_window_tokens <= r.full_window_tokens),
                "case {case}: {s} attends more than the full window"
            );
            compared += 1;
        }
    }
    Ok(format!("{compared} strategy/stream pairs bit-identical to full"))
}

// ------------------------------------------------------------------ 4

fn compression_accounting() -> Result<String> {
    const OMEGA: usize = 16;
    const N: usize = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let grid = Grid::new(16, 16);
    let frames: Vec<FrameInput> = (0..OMEGA + 8).map(|t| random_frame(&mut rng, t, grid, 1, 8)).collect();
    let cases = [
        (
            "aks 1/16",
            CompressionStrategy::Aks {
                keep: TokenKeep::Ratio(1.0 / 16.0),
            },
            15.0,
            16.0,
        ),
        ("pool k=2", CompressionStrategy::Pool { kernel: 2 }, 4.0, 4.0),
        ("dilated 4", CompressionStrategy::Dilated { stride: 4 }, 16.0, 16.0),
        (
            "uniform ω/8",
            CompressionStrategy::UniformFrames { keep: OMEGA / 8 },
            8.0,
            8.0,
        ),
    ];
    let mut lines = Vec::new();
    for (name, strategy, min_rate, nominal) in cases {
        let (_, trace, _) = run_encode(&frames, store(1, 1, 8, WindowCapacity::Frames(OMEGA), None), strategy)?;
        let rate = trace
            .compression_rate()
            .ok_or_else(|| anyhow!("{name}: no window tokens"))?;
        // Frame-local strategies compress every window by the same factor. A
        // fixed frame count only reaches its factor once the window is full.
        let window_level = matches!(strategy, CompressionStrategy::UniformFrames { .. });
        for r in trace
            .records
            .iter()
            .filter(|r| !window_level || r.window_frames == OMEGA)
        {
            // Each record may exceed its nominal share by at most one frame.
            let bound = r.full_window_tokens as f64 / nominal + N as f64;
            ensure!(
                r.attended_window_tokens as f64 <= bound,
                "{name}: frame {} attends {} > {bound}",
                r.frame_index,
                r.attended_window_tokens
            );
        }
        let steady: Vec<_> = trace.records.iter().filter(|r| r.window_frames == OMEGA).collect();
        ensure!(!steady.is_empty(), "{name}: window never filled");
        let full: usize = steady.iter().map(|r| r.full_window_tokens).sum();
        let attended: usize = steady.iter().map(|r| r.attended_window_tokens).sum();
        let steady_rate = full as f64 / attended as f64;
        ensure!(
            steady_rate >= min_rate,
            "{name}: steady-state rate {steady_rate:.2} < {min_rate}"
        );
        if name.starts_with("aks") {
            ensure!(rate >= 15.0, "{name}: overall rate {rate:.2} < 15");
        }
        lines.push(format!("{name} {steady_rate:.1}x"));
    }
    Ok(lines.join(", "))
}

// ------------------------------------------------------------------ 5

fn brute_rank(scores: &[f64], i: usize) -> usize {
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > scores[i] || (s == scores[i] && j < i))
        .count()
}

fn rrf_correctness() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x22F);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let t = rng.gen_range(1..=60);
        let k = [0.0, 1.0, 60.0, rng.gen_range(0.0..200.0)][case % 4];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if case % 3 == 0 {
                // Coarse scores force ties.
                (0..t).map(|_| rng.gen_range(0..5) as f64).collect()
            } else {
                (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let rankings = [
            Ranking::from_scores(Expert::Layer(0), a.clone()),
            Ranking::from_scores(Expert::External("ext".into()), b.clone()),
        ];
        let fused = rrf_fuse(&rankings, k, None)?;
        for i in 0..t {
            let expected = 1.0 / (k + brute_rank(&a, i) as f64) + 1.0 / (k + brute_rank(&b, i) as f64);
            worst = worst.max((fused[i] - expected).abs());
        }
        ensure!(worst <= 1e-12, "case {case}: deviation {worst:e}");

        // Scale invariance: a positive affine map of either expert changes nothing.
        let scale = rng.gen_range(0.01..100.0);
        let shift = rng.gen_range(-5.0..5.0);
        let rescaled = [
            Ranking::from_scores(Expert::Layer(0), a.iter().map(|x| x * scale + shift).collect()),
            rankings[1].clone(),
        ];
        if case % 3 != 0 {
            ensure!(
                rrf_fuse(&rescaled, k, None)? == fused,
                "case {case}: not scale invariant"
            );
        }

        // Agreement dominance: ranked no worse by both experts implies fused no lower.
        for i in 0..t {
            for j in 0..t {
                let (ri, rj) = (&rankings[0].rank_of, &rankings[1].rank_of);
                if ri[i] <= ri[j] && rj[i] <= rj[j] {
                    ensure!(fused[i] >= fused[j], "case {case}: {i} dominates {j} but scores lower");
                }
            }
        }
    }
    let both_first = rrf_fuse(
        &[
            Ranking::from_scores(Expert::Layer(0), vec![1.0, 0.0]),
            Ranking::from_scores(Expert::Layer(1), vec![1.0, 0.0]),
        ],
        60.0,
        None,
    )?;
    ensure!((both_first[0] - 2.0 / 61.0).abs() < 1e-15, "2/61 example");
    Ok(format!("100 pairs, max deviation {worst:.1e}"))
}

// ------------------------------------------------------------------ 6

struct Planted {
    model: ToyModel,
    store: TieredCacheStore,
    trace: EncodeTrace,
    emb: ExternalEmbeddings,
    questions: Vec<(QuestionFeatures, Vec<usize>)>,
}

fn planted() -> Result<Planted> {
    let model = ToyModel::new(ToyModelConfig {
        layers: 4,
        heads: 2,
        head_dim: 32,
        tokens: TokenSchedule::Fixed(Grid::new(4, 4)),
        input_dim: 32,
        external_dim: 32,
        question_tokens: 4,
        seed: 21,
    })?;
    let frames = 200;
    let bench = gen_benchmark(&BenchmarkSpec {
        frames,
        clues: random_clue_spec(frames, 4, 4, 21)?,
        margin: SEPARABLE_MARGIN,
        redundancy: 0.9,
        input_dim: 32,
        seed: 21,
    })?;
    let mut store = store(4, 2, 32, WindowCapacity::Frames(8), None);
    let mut trace = EncodeTrace::default();
    let inputs = bench
        .features
        .iter()
        .enumerate()
        .map(|(t, f)| Ok(model.frame_input(t, f, Grid::new(4, 4)).unwrap()));
    encode_stream(
        inputs,
        &mut store,
        CompressionStrategy::default(),
        &mut trace,
        |_, _| {},
    )?;
    let rows: Vec<Vec<f32>> = bench
        .features
        .iter()
        .map(|f| model.external_encode(f))
        .collect::<Result<_, _>>()?;
    let q_ext: BTreeMap<String, Vec<f32>> = bench
        .questions
        .iter()
        .map(|q| Ok((q.id.clone(), model.external_encode(&q.concept)?)))
        .collect::<Result<_>>()?;
    let emb = ExternalEmbeddings::new(
        "toy".into(),
        Matrix::from_rows(32, rows.iter().map(Vec::as_slice))?,
        q_ext,
    )?;
    let questions = bench
        .questions
        .iter()
        .map(|q| {
            Ok((
                QuestionFeatures {
                    id: q.id.clone(),
                    layers: model.project_question(&q.concept)?,
                },
                q.clue.frames.clone(),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Planted {
        model,
        store,
        trace,
        emb,
        questions,
    })
}

fn planted_retrieval(p: &Planted, started: Instant) -> Result<String> {
    ensure!(p.model.config().layers == p.store.layer_count());
    let cfg = |mode| RetrievalConfig {
        mode,
        budget: 64,
        ..Default::default()
    };
    for mode in [RetrievalMode::Internal, RetrievalMode::External, RetrievalMode::Moe] {
        for (q, clue) in &p.questions {
            let result = retrieve(&p.store, Some(&p.emb), q, &cfg(mode))?;
            for l in &result.layers {
                let r = recall_at_k(&l.frames, clue)?;
                ensure!(r == 1.0, "{mode}: {} layer {} recall {r}", q.id, l.layer);
            }
        }
    }

    // Internal scores reordered so the clue frames get the lowest scores and
    // everything else is shuffled; external scores left informative.
    let mut rng = ChaCha8Rng::seed_from_u64(0xAD);
    let mut fused_worst_rank = 0;
    for (q, clue) in &p.questions {
        let mut scores = expert_scores(&p.store, Some(&p.emb), q, RetrievalMode::Moe)?;
        let internal = scores.internal.as_mut().ok_or_else(|| anyhow!("no internal scores"))?;
        for layer in internal.iter_mut() {
            let mut values = layer.clone();
            values.sort_by(|a, b| a.total_cmp(b));
            let (low, rest) = values.split_at(clue.len());
            let mut rest = rest.to_vec();
            rest.shuffle(&mut rng);
            let mut rest = rest.into_iter();
            for (t, s) in layer.iter_mut().enumerate() {
                *s = match clue.iter().position(|&c| c == t) {
                    Some(i) => low[i],
                    None => rest.next().unwrap(),
                };
            }
        }
        let internal_only = rank_and_select(&q.id, &scores, p.store.layer_count(), &cfg(RetrievalMode::Internal))?;
        let moe = rank_and_select(&q.id, &scores, p.store.layer_count(), &cfg(RetrievalMode::Moe))?;
        for (i, m) in internal_only.layers.iter().zip(&moe.layers) {
            let ri = recall_at_k(&i.frames, clue)?;
            ensure!(
                ri == 0.0,
                "{} layer {}: shuffle left internal recall at {ri}",
                q.id,
                i.layer
            );
            let rm = recall_at_k(&m.frames, clue)?;
            ensure!(rm == 1.0, "{} layer {}: adversarial MoE recall {rm}", q.id, m.layer);
            let fused = Ranking::from_scores(Expert::Layer(m.layer), m.scores.clone());
            fused_worst_rank = fused_worst_rank.max(clue.iter().map(|&c| fused.rank_of[c]).max().unwrap());
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "recall 1.0 in all modes; adversarial MoE worst clue rank {fused_worst_rank}/64; {elapsed:.2?}"
    ))
}

// ------------------------------------------------------------------ 7

fn diagnostics(p: &Planted) -> Result<String> {
    let mut worst = 0.0f32;
    for layer in 0..p.store.layer_count() {
        let m = self_similarity(&p.store.rep_matrix(layer)?)?;
        for i in 0..m.rows() {
            worst = worst.max((m.get(i, i) - 1.0).abs());
            for j in 0..i {
                worst = worst.max((m.get(i, j) - m.get(j, i)).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "self-similarity deviation {worst:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = random_matrix(&mut rng, 3, 4);
    let (k, v) = (random_matrix(&mut rng, 2, 4), random_matrix(&mut rng, 2, 4));
    // Identical window keys give every query uniform window weights.
    let same = Matrix::from_rows(4, [[0.3f32, -0.2, 0.5, 0.1].as_slice(); 5])?;
    let uniform = window_attention(&q, Some((&same, &random_matrix(&mut rng, 5, 4))), &k, &v, 2, 2)?
        .entropy
        .ok_or_else(|| anyhow!("no entropy"))?;
    ensure!((uniform - 1.0).abs() < 1e-9, "uniform window entropy {uniform}");
    ensure!((normalized_entropy(&[0.25; 4])? - 1.0).abs() < 1e-12);

    // One window key aligned with the query, far above the others.
    let q1 = Matrix::new(1, 2, vec![10.0, 0.0])?;
    let wk = Matrix::new(4, 2, vec![10.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0])?;
    let one_hot = window_attention(&q1, Some((&wk, &random_matrix(&mut rng, 4, 2))), &q1, &q1, 1, 2)?
        .entropy
        .ok_or_else(|| anyhow!("no entropy"))?;
    ensure!(one_hot < 0.05, "near one-hot entropy {one_hot}");

    let with_entropy = p.trace.entropies().count();
    let hist = entropy_histogram(&p.trace, 20)?;
    ensure!(
        hist.total() == with_entropy,
        "histogram holds {} of {with_entropy}",
        hist.total()
    );
    ensure!(hist.counts.len() == 20 && hist.edges.len() == 21, "bin layout");
    ensure!(
        p.trace.entropies().all(|e| (0.0..=1.0).contains(&e)),
        "entropy outside [0, 1]"
    );
    Ok(format!(
        "sim deviation {worst:.1e}; uniform {uniform:.6}; one-hot {one_hot:.2e}; {with_entropy} entropies binned"
    ))
}

// ------------------------------------------------------------------ 8

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn dir_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir)?.to_string_lossy().into_owned();
                out.insert(rel, read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism_and_persistence() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{"strategy": {"kind": "aks", "keep": {"ratio": 0.25}}, "window": {"frames": 6}, "budget": 16,
            "spill": {"threshold_bytes": 4096}}"#,
    )?;
    let spill_dir = root.join("spill");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let bench = dir.join("bench");
        cli(
            &[
                "gen",
                "--out",
                &s(&bench),
                "--seed",
                "11",
                "--frames",
                "80",
                "--questions",
                "4",
            ],
            &[],
        )?;
        let manifest = bench.join("manifest.json");
        let cache = dir.join("cache.mskv");
        let (enc, _) = cli(
            &[
                "encode",
                "--manifest",
                &s(&manifest),
                "--config",
                &s(&config),
                "--cache",
                &s(&cache),
            ],
            &[("MEMSTREAM_SPILL_DIR", &spill_dir)],
        )?;
        let enc: serde_json::Value = serde_json::from_str(&enc)?;
        ensure!(
            enc["memory"]["spilled_bytes"].as_u64().unwrap_or(0) > 0,
            "run {run}: nothing spilled"
        );
        let (query, _) = cli(
            &[
                "query",
                "--cache",
                &s(&cache),
                "--manifest",
                &s(&manifest),
                "--config",
                &s(&config),
            ],
            &[],
        )?;
        cli(
            &[
                "eval",
                "--cache",
                &s(&cache),
                "--manifest",
                &s(&manifest),
                "--config",
                &s(&config),
                "--out",
                &s(&dir.join("reports")),
            ],
            &[],
        )?;
        runs.push((dir_files(&dir)?, query, enc["output_digest"].clone()));
    }
    ensure!(
        std::fs::read_dir(&spill_dir)
            .map(|mut d| d.next().is_none())
            .unwrap_or(true),
        "spill directory not cleaned up"
    );
    let (a, b) = (&runs[0], &runs[1]);
    ensure!(a.0.keys().eq(b.0.keys()), "runs wrote different file sets");
    for (name, bytes) in &a.0 {
        ensure!(&b.0[name] == bytes, "{name} differs between runs");
    }
    ensure!(a.1 == b.1, "query output differs between runs");
    ensure!(a.2 == b.2, "encode outputs differ between runs");
    let reports = a.0.keys().filter(|k| k.starts_with("reports")).count();
    ensure!(reports == 3, "expected 3 report files, found {reports}");

    // Same stream without spilling: the cache must not notice.
    let cache_nospill = root.join("nospill.mskv");
    let nospill_cfg = root.join("nospill.json");
    std::fs::write(
        &nospill_cfg,
        r#"{"strategy": {"kind": "aks", "keep": {"ratio": 0.25}}, "window": {"frames": 6}, "budget": 16}"#,
    )?;
    cli(
        &[
            "encode",
            "--manifest",
            &s(&root.join("a/bench/manifest.json")),
            "--config",
            &s(&nospill_cfg),
            "--cache",
            &s(&cache_nospill),
        ],
        &[],
    )?;
    ensure!(
        read(&cache_nospill)? == a.0["cache.mskv"],
        "spilled and in-memory caches differ"
    );

    // In-process: spill, save, drop (the restart), reload.
    let mut rng = ChaCha8Rng::seed_from_u64(0x8E);
    let frames: Vec<FrameInput> = (0..30)
        .map(|t| random_frame(&mut rng, t, Grid::new(3, 4), 2, 6))
        .collect();
    let spill = SpillPolicy {
        dir: root.join("inproc-spill"),
        threshold_bytes: 1024,
    };
    let (spilled, _, _) = run_encode(
        &frames,
        store(2, 2, 3, WindowCapacity::Frames(4), Some(spill.clone())),
        CompressionStrategy::Full,
    )?;
    ensure!(spilled.memory().spilled_bytes > 0, "in-process store did not spill");
    let (resident, _, _) = run_encode(
        &frames,
        store(2, 2, 3, WindowCapacity::Frames(4), None),
        CompressionStrategy::Full,
    )?;
    let path = root.join("inproc.mskv");
    save_cache(&spilled, &path)?;
    let before: Vec<_> = (0..2)
        .map(|l| spilled.fetch_frames(l, &(0..30).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    ensure!(encode_cache(&resident)? == read(&path)?, "spill changed cache bytes");
    drop(spilled);
    ensure!(
        std::fs::read_dir(&spill.dir)
            .map(|mut d| d.next().is_none())
            .unwrap_or(true),
        "in-process spill files survived drop"
    );
    let reloaded = load_cache(&path)?;
    ensure!(
        encode_cache(&reloaded)? == read(&path)?,
        "reload re-encodes differently"
    );
    for (l, frames_before) in before.iter().enumerate() {
        let after = reloaded.fetch_frames(l, &(0..30).collect::<Vec<_>>())?;
        for (x, y) in frames_before.iter().zip(&after) {
            let same = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure!(
                same(&x.keys, &y.keys) && same(&x.values, &y.values),
                "layer {l} frame {} differs",
                x.frame_index
            );
        }
    }
    Ok(format!(
        "{} files identical across runs; spill round trip bit-exact",
        a.0.len()
    ))
}

// ------------------------------------------------------------------ 9

fn aks_semantics() -> Result<String> {
    let e1 = [1.0f32, 0.0];
    let e2 = [0.0f32, 1.0];
    let prev = Matrix::from_rows(2, [e1.as_slice(); 4])?;
    let same = aks_select(&prev, &prev, 2)?;
    ensure!(same == vec![0, 1], "identical frames: {same:?}");
    let alt = Matrix::from_rows(2, [e1.as_slice(), &e2, &e1, &e2])?;
    let picked = aks_select(&alt, &prev, 2)?;
    ensure!(picked == vec![1, 3], "alternating: {picked:?}");
    for keep in [4, 5, 100] {
        let all = aks_select(&alt, &prev, keep)?;
        ensure!(all == vec![0, 1, 2, 3], "keep {keep}: {all:?}");
    }
    Ok("{0,1}, {1,3}, all".into())
}

// ------------------------------------------------------------------ driver

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, result: std::thread::Result<Result<String>>| {
        let line = match result {
            Ok(Ok(detail)) => format!("PASS [{id}] {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                format!("FAIL [{id}] {name}: {e:#}")
            }
            Err(panic) => {
                failed += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL [{id}] {name}: panicked: {msg}")
            }
        };
        println!("{line}");
    };
    let run = |f: fn() -> Result<String>| catch_unwind(f);

    report(1, "memory formula exactness", run(memory_formula));
    report(2, "oracle attention equivalence", run(oracle_attention));
    report(3, "storage separation", run(storage_separation));
    report(4, "compression accounting", run(compression_accounting));
    report(5, "RRF correctness", run(rrf_correctness));

    let started = Instant::now();
    let planted = catch_unwind(planted);
    match planted {
        Ok(Ok(p)) => {
            report(
                6,
                "end-to-end planted retrieval",
                catch_unwind(AssertUnwindSafe(|| planted_retrieval(&p, started))),
            );
            report(
                7,
                "diagnostics invariants",
                catch_unwind(AssertUnwindSafe(|| diagnostics(&p))),
            );
        }
        Ok(Err(e)) => {
            let msg = format!("{e:#}");
            report(6, "end-to-end planted retrieval", Ok(Err(anyhow!("setup: {msg}"))));
            report(7, "diagnostics invariants", Ok(Err(anyhow!("setup: {msg}"))));
        }
        Err(_) => {
            report(6, "end-to-end planted retrieval", Ok(Err(anyhow!("setup panicked"))));
            report(7, "diagnostics invariants", Ok(Err(anyhow!("setup panicked"))));
        }
    }

    report(8, "determinism and persistence", run(determinism_and_persistence));
    report(9, "AKS unit semantics", run(aks_semantics));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
