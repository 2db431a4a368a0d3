//! Streaming encode loop.
//!
//! For frame `t` at layer `i` the encoder attends from the frame's queries
//! over `[compressed window ; current frame]`, then hands the frame's full
//! keys and values to the store. Compression only shapes the attended view.

mod compression;
mod kmeans;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compression::{
    aks_select, dilated_select, kmeans_frame_select, pool_window_tokens, temporal_change_select, token_merge,
    uniform_frame_select, CompressionStrategy, SelectionMask, TokenKeep,
};
pub use kmeans::MAX_ITERATIONS as KMEANS_MAX_ITERATIONS;

use crate::kv_store::{FrameKV, Grid, LayerPartition, StoreError, TieredCacheStore};
use crate::numerics::{attend, mean_pool_rows, normalized_entropy, softmax_f64, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("strategy incompatible with input: {0}")]
    IncompatibleStrategy(String),
    /// A frame source failed to produce its input.
    #[error("frame input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, EncodeError>;

/// Queries, keys and values of one frame at one layer, `N × (H·D)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQkv {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

/// One frame feature across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_index: usize,
    pub grid: Grid,
    pub layers: Vec<LayerQkv>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame_index: usize,
    pub layer: usize,
    pub window_frames: usize,
    /// Window tokens before compression.
    pub full_window_tokens: usize,
    /// Window tokens actually attended.
    pub attended_window_tokens: usize,
    /// Normalized entropy of window attention; absent with fewer than two
    /// attended window tokens.
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeTimings {
    pub frames: u64,
    pub selection_nanos: u64,
    pub attention_nanos: u64,
}

/// Per-(frame, layer) diagnostics. Wall-clock timings are kept apart from
/// the records so that records stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodeTrace {
    pub records: Vec<TraceRecord>,
    #[serde(skip)]
    pub timings: EncodeTimings,
}

impl EncodeTrace {
    pub fn full_window_tokens(&self) -> usize {
        self.records.iter().map(|r| r.full_window_tokens).sum()
    }

    pub fn attended_window_tokens(&self) -> usize {
        self.records.iter().map(|r| r.attended_window_tokens).sum()
    }

    /// Full over attended window tokens across the whole stream.
    pub fn compression_rate(&self) -> Option<f64> {
        let attended = self.attended_window_tokens();
        (attended > 0).then(|| self.full_window_tokens() as f64 / attended as f64)
    }

    pub fn entropies(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter_map(|r| r.entropy)
    }
}

/// Compressed view of a window: the rows attention actually sees.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    pub keys: Matrix,
    pub values: Matrix,
    pub frames: Vec<usize>,
    pub full_tokens: usize,
}

impl WindowView {
    pub fn attended_tokens(&self) -> usize {
        self.keys.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub output: Matrix,
    pub entropy: Option<f64>,
}

/// Per-head attention over `[window ; current]`, heads concatenated.
///
/// Entropy is taken per query row and head over the window tokens only,
/// renormalized (a softmax over the window logits), then averaged.
pub fn window_attention(
    queries: &Matrix,
    window: Option<(&Matrix, &Matrix)>,
    keys: &Matrix,
    values: &Matrix,
    head_count: usize,
    head_dim: usize,
) -> Result<WindowAttention> {
    let width = head_count * head_dim;
    for (name, m) in [("queries", queries), ("keys", keys), ("values", values)] {
        if m.cols() != width {
            return Err(EncodeError::ShapeMismatch(format!(
                "{name} have {} columns, expected {head_count}x{head_dim}",
                m.cols()
            )));
        }
    }
    if keys.rows() != values.rows() {
        return Err(EncodeError::ShapeMismatch("keys and values differ in rows".into()));
    }
    let (all_k, all_v, window_len) = match window {
        Some((wk, wv)) if wk.rows() > 0 => {
            if wk.rows() != wv.rows() || wk.cols() != width || wv.cols() != width {
                return Err(EncodeError::ShapeMismatch("window keys/values disagree".into()));
            }
            (
                Matrix::vstack(width, &[wk, keys])?,
                Matrix::vstack(width, &[wv, values])?,
                wk.rows(),
            )
        }
        _ => (keys.clone(), values.clone(), 0),
    };

    let mut output = Matrix::zeros(queries.rows(), width);
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    let mut entropy_err = None;
    for h in 0..head_count {
        let start = h * head_dim;
        let q = queries.column_block(start, head_dim);
        let k = all_k.column_block(start, head_dim);
        let v = all_v.column_block(start, head_dim);
        let out = attend(&q, &k, &v, |_, logits, _| {
            if window_len < 2 || entropy_err.is_some() {
                return;
            }
            let window_mass = softmax_f64(&logits[..window_len]).and_then(|p| normalized_entropy(&p));
            match window_mass {
                Ok(e) => {
                    entropy_sum += e;
                    entropy_count += 1;
                }
                Err(e) => entropy_err = Some(e),
            }
        })?;
        output.set_column_block(start, &out);
    }
    if let Some(e) = entropy_err {
        return Err(e.into());
    }
    Ok(WindowAttention {
        output,
        entropy: (entropy_count > 0).then(|| entropy_sum / entropy_count as f64),
    })
}

#[derive(Debug, Default)]
struct LayerState {
    prev_keys: Option<Matrix>,
    /// Compressed views of hot frames for frame-local strategies.
    views: BTreeMap<usize, (Matrix, Matrix)>,
    masks: BTreeMap<usize, SelectionMask>,
}

/// Drives frames through attention and into the store, one layer partition
/// per worker.
#[derive(Debug)]
pub struct StreamEncoder {
    strategy: CompressionStrategy,
    head_count: usize,
    head_dim: usize,
    states: Vec<LayerState>,
}

impl StreamEncoder {
    pub fn new(strategy: CompressionStrategy, store: &TieredCacheStore) -> Result<Self> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            head_count: store.head_count(),
            head_dim: store.head_dim(),
            states: (0..store.layer_count()).map(|_| LayerState::default()).collect(),
        })
    }

    pub fn strategy(&self) -> CompressionStrategy {
        self.strategy
    }

    /// Token mask cached for a hot frame (token-selecting strategies only).
    pub fn mask(&self, layer: usize, frame: usize) -> Option<&SelectionMask> {
        self.states.get(layer)?.masks.get(&frame)
    }

    /// Encodes one frame on every layer and returns the per-layer outputs.
    pub fn encode_frame(
        &mut self,
        store: &mut TieredCacheStore,
        frame: FrameInput,
        trace: &mut EncodeTrace,
    ) -> Result<Vec<Matrix>> {
        if frame.layers.len() != self.states.len() || store.layer_count() != self.states.len() {
            return Err(EncodeError::ShapeMismatch(format!(
                "frame has {} layers, encoder has {}",
                frame.layers.len(),
                self.states.len()
            )));
        }
        let strategy = self.strategy;
        let (h, d) = (self.head_count, self.head_dim);
        let FrameInput {
            frame_index,
            grid,
            layers,
        } = frame;
        let results: Vec<Result<(Matrix, TraceRecord, EncodeTimings)>> = store
            .layers_mut()
            .par_iter_mut()
            .zip(self.states.par_iter_mut())
            .zip(layers.into_par_iter())
            .map(|((partition, state), qkv)| encode_layer(strategy, h, d, partition, state, frame_index, grid, qkv))
            .collect();
        let mut outputs = Vec::with_capacity(results.len());
        for r in results {
            let (out, record, timing) = r?;
            trace.records.push(record);
            trace.timings.selection_nanos += timing.selection_nanos;
            trace.timings.attention_nanos += timing.attention_nanos;
            outputs.push(out);
        }
        trace.timings.frames += 1;
        Ok(outputs)
    }
}

/// Compressed view of a partition's hot window under `strategy`.
fn build_view(
    strategy: CompressionStrategy,
    partition: &LayerPartition,
    state: &LayerState,
    width: usize,
) -> Result<WindowView> {
    let hot: Vec<&FrameKV> = partition.hot_frames().collect();
    let full_tokens = hot.iter().map(|f| f.tokens()).sum();
    let positions: Vec<usize> = match strategy {
        CompressionStrategy::UniformFrames { keep } => uniform_frame_select(hot.len(), keep),
        CompressionStrategy::KmeansFrames { centroids } => {
            let means = hot
                .iter()
                .map(|f| mean_pool_rows(&f.keys))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let refs: Vec<&[f32]> = means.iter().map(Vec::as_slice).collect();
            kmeans_frame_select(&refs, centroids)
        }
        CompressionStrategy::TemporalChange { keep } => {
            let keys: Vec<&Matrix> = hot.iter().map(|f| &f.keys).collect();
            temporal_change_select(&keys, keep)?
        }
        _ => (0..hot.len()).collect(),
    };
    let frames: Vec<usize> = positions.iter().map(|&p| hot[p].frame_index).collect();
    let (keys, values): (Vec<&Matrix>, Vec<&Matrix>) = if strategy.is_frame_local() {
        frames
            .iter()
            .map(|f| {
                let (k, v) = &state.views[f];
                (k, v)
            })
            .unzip()
    } else {
        positions.iter().map(|&p| (&hot[p].keys, &hot[p].values)).unzip()
    };
    Ok(WindowView {
        keys: Matrix::vstack(width, &keys)?,
        values: Matrix::vstack(width, &values)?,
        frames,
        full_tokens,
    })
}

/// Selected token indices (when the view is a row subset) and the view itself.
type FrameView = (Option<Vec<usize>>, (Matrix, Matrix));

/// Frame-local compressed view, built once when the frame enters the window.
fn frame_view(strategy: CompressionStrategy, frame: &FrameKV, prev_keys: Option<&Matrix>) -> Result<FrameView> {
    let select = |idx: Vec<usize>| {
        let view = (frame.keys.select_rows(&idx), frame.values.select_rows(&idx));
        (Some(idx), view)
    };
    Ok(match strategy {
        CompressionStrategy::Pool { kernel } => (None, pool_window_tokens(frame, kernel)),
        CompressionStrategy::Dilated { stride } => select(dilated_select(frame.grid, stride)),
        CompressionStrategy::TokenMerge { merges } => (None, token_merge(frame, merges)?),
        CompressionStrategy::Aks { keep } => {
            let keep = keep.resolve(frame.tokens());
            let idx = match prev_keys {
                Some(prev) => aks_select(&frame.keys, prev, keep)?,
                None => dilated_select(frame.grid, compression::stride_for_budget(frame.grid, keep)),
            };
            select(idx)
        }
        _ => unreachable!("only frame-local strategies build per-frame views"),
    })
}

#[allow(clippy::too_many_arguments)]
fn encode_layer(
    strategy: CompressionStrategy,
    head_count: usize,
    head_dim: usize,
    partition: &mut LayerPartition,
    state: &mut LayerState,
    frame_index: usize,
    grid: Grid,
    qkv: LayerQkv,
) -> Result<(Matrix, TraceRecord, EncodeTimings)> {
    let layer = partition.layer();
    let width = head_count * head_dim;
    if qkv.queries.rows() != grid.tokens() {
        return Err(EncodeError::ShapeMismatch(format!(
            "layer {layer}, frame {frame_index}: {} query rows for a {}x{} grid",
            qkv.queries.rows(),
            grid.height,
            grid.width
        )));
    }
    let mut timing = EncodeTimings::default();
    let started = Instant::now();
    let view = build_view(strategy, partition, state, width)?;
    timing.selection_nanos += started.elapsed().as_nanos() as u64;

    let started = Instant::now();
    let window = (view.attended_tokens() > 0).then_some((&view.keys, &view.values));
    let attn = window_attention(&qkv.queries, window, &qkv.keys, &qkv.values, head_count, head_dim)?;
    timing.attention_nanos += started.elapsed().as_nanos() as u64;

    let record = TraceRecord {
        frame_index,
        layer,
        window_frames: partition.hot_frames().len(),
        full_window_tokens: view.full_tokens,
        attended_window_tokens: view.attended_tokens(),
        entropy: attn.entropy,
    };

    let frame = FrameKV::new(frame_index, layer, qkv.keys, qkv.values, grid, head_count, head_dim)?;
    let started = Instant::now();
    let local = if strategy.is_frame_local() {
        Some(frame_view(strategy, &frame, state.prev_keys.as_ref())?)
    } else {
        None
    };
    timing.selection_nanos += started.elapsed().as_nanos() as u64;
    let next_prev = matches!(strategy, CompressionStrategy::Aks { .. }).then(|| frame.keys.clone());

    let report = partition.append(frame)?;
    if let Some((mask, view)) = local {
        if let Some(indices) = mask {
            state.masks.insert(
                frame_index,
                SelectionMask {
                    frame_index,
                    layer,
                    indices,
                },
            );
        }
        state.views.insert(frame_index, view);
    }
    for evicted in &report.evicted {
        state.views.remove(evicted);
        state.masks.remove(evicted);
    }
    state.prev_keys = next_prev;
    Ok((attn.output, record, timing))
}

/// Encodes a whole stream, flushes the store, and passes each frame's
/// per-layer outputs to `on_output`.
pub fn encode_stream<I, F>(
    frames: I,
    store: &mut TieredCacheStore,
    strategy: CompressionStrategy,
    trace: &mut EncodeTrace,
    mut on_output: F,
) -> Result<()>
where
    I: IntoIterator<Item = Result<FrameInput>>,
    F: FnMut(usize, Vec<Matrix>),
{
    let mut encoder = StreamEncoder::new(strategy, store)?;
    for frame in frames {
        let frame = frame?;
        let index = frame.frame_index;
        let outputs = encoder.encode_frame(store, frame, trace)?;
        on_output(index, outputs);
    }
    store.flush()?;
    Ok(())
}
