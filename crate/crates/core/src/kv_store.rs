//! Tiered per-layer KV cache.
//!
//! Each layer owns a [`LayerPartition`]: a hot FIFO window bounded by a
//! token (or frame) budget, an offloaded tier that is memory-resident until
//! a byte threshold is crossed and then spills to disk, and one
//! representative vector per offloaded frame (the mean of its key rows).
//! Partitions share nothing, so layers can be driven from separate threads.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{mean_pool_rows, Matrix, NumericsError};

pub const CACHE_MAGIC: &[u8; 4] = b"MSKV";
pub const CACHE_VERSION: u32 = 1;
/// Default window budget, counted on full (uncompressed) tokens.
pub const DEFAULT_WINDOW_TOKENS: usize = 17_000;

const F32_BYTES: u64 = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("layer {layer}: frame {got} does not follow frame {last}")]
    NonMonotoneFrame { layer: usize, last: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {0} out of range")]
    UnknownLayer(usize),
    #[error("layer {layer}: frame {frame} is not in the cache")]
    UnknownFrame { layer: usize, frame: usize },
    #[error("layer {layer}: missing representative vector for frame {frame}")]
    MissingRepVector { layer: usize, frame: usize },
    #[error("store has hot frames; flush before saving")]
    NotFlushed,
    #[error("byte count overflows 64 bits")]
    Overflow,
    #[error("corrupt cache file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Spatial token grid `(h_p, w_p)` of one frame, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Keys and values of one frame at one layer. Heads are flattened into the
/// feature axis: column block `h*D..(h+1)*D` belongs to head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameKV {
    pub frame_index: usize,
    pub layer: usize,
    pub keys: Matrix,
    pub values: Matrix,
    pub grid: Grid,
    pub head_count: usize,
    pub head_dim: usize,
}

impl FrameKV {
    pub fn new(
        frame_index: usize,
        layer: usize,
        keys: Matrix,
        values: Matrix,
        grid: Grid,
        head_count: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if keys.rows() != values.rows() || keys.cols() != values.cols() {
            return Err(StoreError::ShapeMismatch(format!(
                "keys {}x{} vs values {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            )));
        }
        if grid.tokens() == 0 || grid.tokens() != keys.rows() {
            return Err(StoreError::ShapeMismatch(format!(
                "grid {}x{} for {} token rows",
                grid.height,
                grid.width,
                keys.rows()
            )));
        }
        if head_count == 0 || head_dim == 0 || head_count * head_dim != keys.cols() {
            return Err(StoreError::ShapeMismatch(format!(
                "{head_count} heads x {head_dim} dims for {} columns",
                keys.cols()
            )));
        }
        Ok(Self {
            frame_index,
            layer,
            keys,
            values,
            grid,
            head_count,
            head_dim,
        })
    }

    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }

    /// In-engine footprint of keys plus values.
    pub fn byte_len(&self) -> u64 {
        2 * (self.keys.data().len() as u64) * F32_BYTES
    }
}

/// Mean of a frame's full key rows; the retrieval index entry for the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepVector {
    pub frame_index: usize,
    pub layer: usize,
    pub vec: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCapacity {
    /// Budget on the summed full token count of hot frames.
    Tokens(usize),
    /// At most this many hot frames (the formal ω).
    Frames(usize),
}

impl Default for WindowCapacity {
    fn default() -> Self {
        WindowCapacity::Tokens(DEFAULT_WINDOW_TOKENS)
    }
}

/// Offloaded frames spill to `dir` once a partition's memory-resident
/// offloaded bytes exceed `threshold_bytes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpillPolicy {
    pub dir: PathBuf,
    pub threshold_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub capacity: WindowCapacity,
    pub spill: Option<SpillPolicy>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionReport {
    /// Frames moved out of the hot window, oldest first.
    pub evicted: Vec<usize>,
    /// Frames written to disk during this call.
    pub spilled: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryUsage {
    pub hot_bytes: u64,
    pub resident_offloaded_bytes: u64,
    pub spilled_bytes: u64,
    pub rep_bytes: u64,
}

impl std::ops::AddAssign for MemoryUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.hot_bytes += rhs.hot_bytes;
        self.resident_offloaded_bytes += rhs.resident_offloaded_bytes;
        self.spilled_bytes += rhs.spilled_bytes;
        self.rep_bytes += rhs.rep_bytes;
    }
}

#[derive(Debug)]
enum Offloaded {
    Resident(FrameKV),
    Spilled { path: PathBuf, tokens: usize, grid: Grid },
}

#[derive(Debug)]
struct SpillTarget {
    dir: PathBuf,
    threshold_bytes: u64,
    created: bool,
}

/// One layer's slice of the cache.
#[derive(Debug)]
pub struct LayerPartition {
    layer: usize,
    head_count: usize,
    head_dim: usize,
    capacity: WindowCapacity,
    spill: Option<SpillTarget>,
    hot: VecDeque<FrameKV>,
    hot_tokens: usize,
    offloaded: BTreeMap<usize, Offloaded>,
    reps: BTreeMap<usize, RepVector>,
    last_index: Option<usize>,
    resident_bytes: u64,
    spilled_bytes: u64,
}

static SPILL_SESSION: AtomicU64 = AtomicU64::new(0);

impl LayerPartition {
    fn new(layer: usize, config: &StoreConfig, session_dir: Option<&Path>) -> Self {
        let spill = config.spill.as_ref().map(|policy| SpillTarget {
            dir: session_dir
                .expect("session dir exists when spilling")
                .join(format!("layer{layer:04}")),
            threshold_bytes: policy.threshold_bytes,
            created: false,
        });
        Self {
            layer,
            head_count: config.head_count,
            head_dim: config.head_dim,
            capacity: config.capacity,
            spill,
            hot: VecDeque::new(),
            hot_tokens: 0,
            offloaded: BTreeMap::new(),
            reps: BTreeMap::new(),
            last_index: None,
            resident_bytes: 0,
            spilled_bytes: 0,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Hot window, oldest first.
    pub fn hot_frames(&self) -> impl ExactSizeIterator<Item = &FrameKV> + DoubleEndedIterator {
        self.hot.iter()
    }

    pub fn hot_tokens(&self) -> usize {
        self.hot_tokens
    }

    pub fn offloaded_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.offloaded.keys().copied()
    }

    pub fn rep_vectors(&self) -> impl ExactSizeIterator<Item = &RepVector> {
        self.reps.values()
    }

    pub fn rep_vector(&self, frame: usize) -> Option<&RepVector> {
        self.reps.get(&frame)
    }

    pub fn last_index(&self) -> Option<usize> {
        self.last_index
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.offloaded.contains_key(&frame) || self.hot.iter().any(|f| f.frame_index == frame)
    }

    pub fn memory(&self) -> MemoryUsage {
        MemoryUsage {
            hot_bytes: self.hot.iter().map(FrameKV::byte_len).sum(),
            resident_offloaded_bytes: self.resident_bytes,
            spilled_bytes: self.spilled_bytes,
            rep_bytes: self.reps.len() as u64 * (self.head_count * self.head_dim) as u64 * F32_BYTES,
        }
    }

    fn over_capacity(&self) -> bool {
        match self.capacity {
            WindowCapacity::Tokens(budget) => self.hot_tokens > budget,
            WindowCapacity::Frames(budget) => self.hot.len() > budget,
        }
    }

    /// Appends a frame and evicts oldest-first until the window fits its budget.
    /// A single frame larger than a token budget is evicted immediately.
    pub fn append(&mut self, frame: FrameKV) -> Result<EvictionReport> {
        if frame.layer != self.layer {
            return Err(StoreError::ShapeMismatch(format!(
                "frame for layer {} appended to layer {}",
                frame.layer, self.layer
            )));
        }
        if frame.head_count != self.head_count || frame.head_dim != self.head_dim {
            return Err(StoreError::ShapeMismatch(format!(
                "frame has {}x{} heads, store expects {}x{}",
                frame.head_count, frame.head_dim, self.head_count, self.head_dim
            )));
        }
        if let Some(last) = self.last_index {
            if frame.frame_index <= last {
                return Err(StoreError::NonMonotoneFrame {
                    layer: self.layer,
                    last,
                    got: frame.frame_index,
                });
            }
        }
        self.last_index = Some(frame.frame_index);
        self.hot_tokens += frame.tokens();
        self.hot.push_back(frame);

        let mut report = EvictionReport::default();
        while self.over_capacity() {
            let Some(old) = self.hot.pop_front() else { break };
            self.hot_tokens -= old.tokens();
            report.evicted.push(old.frame_index);
            self.offload(old)?;
        }
        report.spilled = self.enforce_spill()?;
        Ok(report)
    }

    /// Offloads every hot frame.
    pub fn flush(&mut self) -> Result<EvictionReport> {
        let mut report = EvictionReport::default();
        while let Some(old) = self.hot.pop_front() {
            self.hot_tokens -= old.tokens();
            report.evicted.push(old.frame_index);
            self.offload(old)?;
        }
        report.spilled = self.enforce_spill()?;
        Ok(report)
    }

    fn offload(&mut self, frame: FrameKV) -> Result<()> {
        let vec = mean_pool_rows(&frame.keys)?;
        self.reps.insert(
            frame.frame_index,
            RepVector {
                frame_index: frame.frame_index,
                layer: self.layer,
                vec,
            },
        );
        self.resident_bytes += frame.byte_len();
        self.offloaded.insert(frame.frame_index, Offloaded::Resident(frame));
        Ok(())
    }

    fn enforce_spill(&mut self) -> Result<Vec<usize>> {
        let mut spilled = Vec::new();
        let Some(target) = self.spill.as_mut() else {
            return Ok(spilled);
        };
        if self.resident_bytes <= target.threshold_bytes {
            return Ok(spilled);
        }
        if !target.created {
            fs::create_dir_all(&target.dir)?;
            target.created = true;
        }
        // Oldest resident frames go first.
        for (&index, slot) in self.offloaded.iter_mut() {
            if self.resident_bytes <= target.threshold_bytes {
                break;
            }
            if let Offloaded::Resident(frame) = slot {
                let path = target.dir.join(format!("frame{index:08}.kv"));
                let mut file = io::BufWriter::new(fs::File::create(&path)?);
                write_f32s(&mut file, frame.keys.data())?;
                write_f32s(&mut file, frame.values.data())?;
                file.flush()?;
                let bytes = frame.byte_len();
                *slot = Offloaded::Spilled {
                    path,
                    tokens: frame.tokens(),
                    grid: frame.grid,
                };
                self.resident_bytes -= bytes;
                self.spilled_bytes += bytes;
                spilled.push(index);
            }
        }
        Ok(spilled)
    }

    fn load_spilled(&self, frame_index: usize, path: &Path, tokens: usize, grid: Grid) -> Result<FrameKV> {
        let cols = self.head_count * self.head_dim;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let expected = 2 * tokens * cols * F32_BYTES as usize;
        if bytes.len() != expected {
            return Err(StoreError::Corrupt(format!(
                "spill file {} holds {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let (k, v) = bytes.split_at(expected / 2);
        FrameKV::new(
            frame_index,
            self.layer,
            Matrix::new(tokens, cols, read_f32s(k))?,
            Matrix::new(tokens, cols, read_f32s(v))?,
            grid,
            self.head_count,
            self.head_dim,
        )
    }

    pub fn fetch(&self, frame: usize) -> Result<FrameKV> {
        match self.offloaded.get(&frame) {
            Some(Offloaded::Resident(kv)) => Ok(kv.clone()),
            Some(Offloaded::Spilled { path, tokens, grid }) => self.load_spilled(frame, path, *tokens, *grid),
            None => self
                .hot
                .iter()
                .find(|f| f.frame_index == frame)
                .cloned()
                .ok_or(StoreError::UnknownFrame {
                    layer: self.layer,
                    frame,
                }),
        }
    }
}

impl Drop for LayerPartition {
    fn drop(&mut self) {
        for slot in self.offloaded.values() {
            if let Offloaded::Spilled { path, .. } = slot {
                let _ = fs::remove_file(path);
            }
        }
        if let Some(target) = &self.spill {
            if target.created {
                let _ = fs::remove_dir(&target.dir);
            }
        }
    }
}

/// Per-layer hot window plus offloaded tier and representative-vector index.
#[derive(Debug)]
pub struct TieredCacheStore {
    config: StoreConfig,
    session_dir: Option<PathBuf>,
    layers: Vec<LayerPartition>,
}

impl TieredCacheStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        if config.layer_count == 0 || config.head_count == 0 || config.head_dim == 0 {
            return Err(StoreError::ShapeMismatch(
                "layer count, head count and head dim must be >= 1".into(),
            ));
        }
        // Distinct stores may share one spill directory.
        let session_dir = config.spill.as_ref().map(|policy| {
            policy.dir.join(format!(
                "session-{}-{}",
                std::process::id(),
                SPILL_SESSION.fetch_add(1, Ordering::Relaxed)
            ))
        });
        let layers = (0..config.layer_count)
            .map(|i| LayerPartition::new(i, &config, session_dir.as_deref()))
            .collect();
        Ok(Self {
            config,
            session_dir,
            layers,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count
    }

    pub fn head_count(&self) -> usize {
        self.config.head_count
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerPartition> {
        self.layers.get(layer).ok_or(StoreError::UnknownLayer(layer))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerPartition> {
        self.layers.get_mut(layer).ok_or(StoreError::UnknownLayer(layer))
    }

    /// All partitions, for driving layers in parallel.
    pub fn layers_mut(&mut self) -> &mut [LayerPartition] {
        &mut self.layers
    }

    pub fn layers(&self) -> &[LayerPartition] {
        &self.layers
    }

    pub fn append_frame(&mut self, layer: usize, frame: FrameKV) -> Result<EvictionReport> {
        self.layer_mut(layer)?.append(frame)
    }

    pub fn flush(&mut self) -> Result<()> {
        for partition in &mut self.layers {
            partition.flush()?;
        }
        Ok(())
    }

    pub fn is_flushed(&self) -> bool {
        self.layers.iter().all(|p| p.hot.is_empty())
    }

    /// One past the largest frame index seen on any layer.
    pub fn frame_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|p| p.last_index)
            .max()
            .map_or(0, |i| i + 1)
    }

    /// Frames at `indices`, deduplicated and in ascending frame order.
    pub fn fetch_frames(&self, layer: usize, indices: &[usize]) -> Result<Vec<FrameKV>> {
        let partition = self.layer(layer)?;
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.into_iter().map(|i| partition.fetch(i)).collect()
    }

    /// Representative vectors for frames `0..T`, in order. Requires every
    /// frame to have been offloaded.
    pub fn rep_matrix(&self, layer: usize) -> Result<Vec<&[f32]>> {
        let partition = self.layer(layer)?;
        (0..self.frame_count())
            .map(|frame| {
                partition
                    .reps
                    .get(&frame)
                    .map(|r| r.vec.as_slice())
                    .ok_or(StoreError::MissingRepVector { layer, frame })
            })
            .collect()
    }

    pub fn memory(&self) -> MemoryUsage {
        let mut total = MemoryUsage::default();
        for p in &self.layers {
            total += p.memory();
        }
        total
    }
}

impl Drop for TieredCacheStore {
    fn drop(&mut self) {
        // Partitions clean their own files first.
        self.layers.clear();
        if let Some(dir) = &self.session_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

/// `2 · L · T · M · H · D · bytes_per_elem`, with overflow reported.
pub fn kv_cache_bytes(
    layers: u64,
    frames: u64,
    tokens_per_frame: u64,
    heads: u64,
    head_dim: u64,
    bytes_per_elem: u64,
) -> Result<u64> {
    [layers, frames, tokens_per_frame, heads, head_dim, bytes_per_elem]
        .into_iter()
        .try_fold(2u64, |acc, x| acc.checked_mul(x))
        .ok_or(StoreError::Overflow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub layer_count: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub frame_count: usize,
    pub capacity: WindowCapacity,
    pub payload_bytes: u64,
    pub frames: Vec<CachedFrame>,
}

/// Offsets are relative to the first payload byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedFrame {
    pub layer: usize,
    pub frame_index: usize,
    pub tokens: usize,
    pub grid: [usize; 2],
    pub keys_offset: u64,
    pub values_offset: u64,
    pub rep_offset: u64,
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes a flushed store: magic, version, length-prefixed JSON manifest,
/// then little-endian `f32` payloads (keys, values, rep vector per frame).
pub fn save_cache(store: &TieredCacheStore, path: &Path) -> Result<()> {
    let bytes = encode_cache(store)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn encode_cache(store: &TieredCacheStore) -> Result<Vec<u8>> {
    if !store.is_flushed() {
        return Err(StoreError::NotFlushed);
    }
    let cols = (store.head_count() * store.head_dim()) as u64;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for partition in &store.layers {
        for &frame_index in partition.offloaded.keys() {
            let kv = partition.fetch(frame_index)?;
            let rep = partition.reps.get(&frame_index).ok_or(StoreError::MissingRepVector {
                layer: partition.layer,
                frame: frame_index,
            })?;
            let keys_offset = payload.len() as u64;
            write_f32s(&mut payload, kv.keys.data())?;
            let values_offset = payload.len() as u64;
            write_f32s(&mut payload, kv.values.data())?;
            let rep_offset = payload.len() as u64;
            write_f32s(&mut payload, &rep.vec)?;
            debug_assert_eq!(
                payload.len() as u64 - keys_offset,
                (2 * kv.tokens() as u64 + 1) * cols * F32_BYTES
            );
            entries.push(CachedFrame {
                layer: partition.layer,
                frame_index,
                tokens: kv.tokens(),
                grid: [kv.grid.height, kv.grid.width],
                keys_offset,
                values_offset,
                rep_offset,
            });
        }
    }
    let manifest = CacheManifest {
        version: CACHE_VERSION,
        layer_count: store.layer_count(),
        head_count: store.head_count(),
        head_dim: store.head_dim(),
        frame_count: store.frame_count(),
        capacity: store.config.capacity,
        payload_bytes: payload.len() as u64,
        frames: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn load_cache(path: &Path) -> Result<TieredCacheStore> {
    decode_cache(&fs::read(path)?)
}

pub fn decode_cache(bytes: &[u8]) -> Result<TieredCacheStore> {
    let corrupt = |msg: &str| StoreError::Corrupt(msg.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(StoreError::Corrupt(format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let json_end = 16u64
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| corrupt("manifest extends past end of file"))? as usize;
    let manifest: CacheManifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| StoreError::Corrupt(format!("manifest: {e}")))?;
    let payload = &bytes[json_end..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(StoreError::Corrupt(format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if manifest.version != CACHE_VERSION {
        return Err(corrupt("manifest version disagrees with header"));
    }

    let mut store = TieredCacheStore::new(StoreConfig {
        layer_count: manifest.layer_count,
        head_count: manifest.head_count,
        head_dim: manifest.head_dim,
        capacity: manifest.capacity,
        spill: None,
    })?;
    let cols = manifest.head_count * manifest.head_dim;
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.frames.len() * 3);
    for entry in &manifest.frames {
        let grid = Grid::new(entry.grid[0], entry.grid[1]);
        if grid.tokens() != entry.tokens {
            return Err(StoreError::Corrupt(format!(
                "frame {} declares {} tokens on a {}x{} grid",
                entry.frame_index, entry.tokens, grid.height, grid.width
            )));
        }
        let kv_len = (entry.tokens * cols) as u64 * F32_BYTES;
        let rep_len = cols as u64 * F32_BYTES;
        let slice = |offset: u64, len: u64| -> Result<&[u8]> {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| corrupt("tensor offset out of range"))?;
            Ok(&payload[offset as usize..end as usize])
        };
        let keys = Matrix::new(entry.tokens, cols, read_f32s(slice(entry.keys_offset, kv_len)?))?;
        let values = Matrix::new(entry.tokens, cols, read_f32s(slice(entry.values_offset, kv_len)?))?;
        let rep = read_f32s(slice(entry.rep_offset, rep_len)?);
        spans.push((entry.keys_offset, kv_len));
        spans.push((entry.values_offset, kv_len));
        spans.push((entry.rep_offset, rep_len));

        let partition = store
            .layers
            .get_mut(entry.layer)
            .ok_or_else(|| corrupt("frame references a missing layer"))?;
        if partition.last_index.is_some_and(|last| entry.frame_index <= last) {
            return Err(corrupt("frame indices not strictly increasing"));
        }
        partition.last_index = Some(entry.frame_index);
        let kv = FrameKV::new(
            entry.frame_index,
            entry.layer,
            keys,
            values,
            grid,
            manifest.head_count,
            manifest.head_dim,
        )?;
        partition.resident_bytes += kv.byte_len();
        partition.reps.insert(
            entry.frame_index,
            RepVector {
                frame_index: entry.frame_index,
                layer: entry.layer,
                vec: rep,
            },
        );
        partition.offloaded.insert(entry.frame_index, Offloaded::Resident(kv));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0) {
        return Err(corrupt("overlapping tensor payloads"));
    }
    if store.frame_count() != manifest.frame_count {
        return Err(corrupt("frame count disagrees with stored frames"));
    }
    Ok(store)
}
