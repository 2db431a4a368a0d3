//! Window compression strategies. Every strategy decides from keys and
//! applies the same selection, pooling or merge weights to values. None of
//! them touch what is stored in the cache.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans_select;
use super::EncodeError;
use crate::kv_store::{FrameKV, Grid};
use crate::numerics::{bottom_k_asc, cosine_sim, Matrix};

/// Per-frame token keep budget for adaptive key selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKeep {
    Count(usize),
    /// Fraction of the frame's tokens, rounded up.
    Ratio(f64),
}

impl TokenKeep {
    pub const DEFAULT_RATIO: f64 = 1.0 / 16.0;

    pub fn resolve(&self, tokens: usize) -> usize {
        match *self {
            TokenKeep::Count(k) => k,
            TokenKeep::Ratio(r) => ((tokens as f64 * r).ceil() as usize).max(1),
        }
    }
}

impl Default for TokenKeep {
    fn default() -> Self {
        TokenKeep::Ratio(Self::DEFAULT_RATIO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressionStrategy {
    #[default]
    Full,
    /// k×k average pooling over each frame's token grid.
    Pool { kernel: usize },
    /// Every `stride`-th token along both grid axes.
    Dilated { stride: usize },
    /// `keep` frames evenly spaced over the window.
    UniformFrames { keep: usize },
    /// One bipartite merge pass removing `merges` tokens per frame.
    TokenMerge { merges: usize },
    /// One representative frame per k-means cluster of window frames.
    KmeansFrames { centroids: usize },
    /// Frames that changed most from their predecessor.
    TemporalChange { keep: usize },
    /// Tokens least similar to the same grid position in the previous frame.
    Aks { keep: TokenKeep },
}

impl CompressionStrategy {
    pub fn validate(&self) -> Result<(), EncodeError> {
        let bad = |what: &str| Err(EncodeError::IncompatibleStrategy(format!("{what} must be >= 1")));
        match *self {
            CompressionStrategy::Pool { kernel: 0 } => bad("pool kernel"),
            CompressionStrategy::Dilated { stride: 0 } => bad("dilation stride"),
            CompressionStrategy::UniformFrames { keep: 0 } => bad("uniform frame count"),
            CompressionStrategy::KmeansFrames { centroids: 0 } => bad("centroid count"),
            CompressionStrategy::TemporalChange { keep: 0 } => bad("temporal keep count"),
            CompressionStrategy::Aks {
                keep: TokenKeep::Count(0),
            } => bad("key selection count"),
            CompressionStrategy::Aks {
                keep: TokenKeep::Ratio(r),
            } if !(r > 0.0 && r <= 1.0) => Err(EncodeError::IncompatibleStrategy(format!(
                "key selection ratio {r} outside (0, 1]"
            ))),
            _ => Ok(()),
        }
    }

    /// Strategies whose compressed view depends only on the frame itself
    /// (and, for AKS, its predecessor); their views are built once at insertion.
    pub(crate) fn is_frame_local(&self) -> bool {
        matches!(
            self,
            CompressionStrategy::Pool { .. }
                | CompressionStrategy::Dilated { .. }
                | CompressionStrategy::TokenMerge { .. }
                | CompressionStrategy::Aks { .. }
        )
    }
}

impl fmt::Display for CompressionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionStrategy::Full => write!(f, "full"),
            CompressionStrategy::Pool { kernel } => write!(f, "pool:{kernel}"),
            CompressionStrategy::Dilated { stride } => write!(f, "dilated:{stride}"),
            CompressionStrategy::UniformFrames { keep } => write!(f, "uniform:{keep}"),
            CompressionStrategy::TokenMerge { merges } => write!(f, "tome:{merges}"),
            CompressionStrategy::KmeansFrames { centroids } => write!(f, "kmeans:{centroids}"),
            CompressionStrategy::TemporalChange { keep } => write!(f, "temporal:{keep}"),
            CompressionStrategy::Aks {
                keep: TokenKeep::Count(k),
            } => write!(f, "aks:{k}"),
            CompressionStrategy::Aks {
                keep: TokenKeep::Ratio(r),
            } => write!(f, "aks:r{r}"),
        }
    }
}

impl FromStr for CompressionStrategy {
    type Err = EncodeError;

    /// `full`, `pool:K`, `dilated:K`, `uniform:K`, `tome:R`, `kmeans:K`,
    /// `temporal:K`, `aks` (ratio 1/16), `aks:K` (count) or `aks:1/C` / `aks:r0.0625` (ratio).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || EncodeError::IncompatibleStrategy(format!("cannot parse strategy '{s}'"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let count = || -> Result<usize, EncodeError> { arg.ok_or_else(err)?.parse().map_err(|_| err()) };
        let strategy = match name.to_ascii_lowercase().as_str() {
            "full" if arg.is_none() => CompressionStrategy::Full,
            "pool" | "a1" => CompressionStrategy::Pool { kernel: count()? },
            "dilated" | "a2" => CompressionStrategy::Dilated { stride: count()? },
            "uniform" | "a3" => CompressionStrategy::UniformFrames { keep: count()? },
            "tome" | "token_merge" | "b1" => CompressionStrategy::TokenMerge { merges: count()? },
            "kmeans" | "b2" => CompressionStrategy::KmeansFrames { centroids: count()? },
            "temporal" | "b3" => CompressionStrategy::TemporalChange { keep: count()? },
            "aks" => {
                let keep = match arg {
                    None => TokenKeep::default(),
                    Some(a) if a.starts_with("1/") => {
                        let denom: f64 = a[2..].parse().map_err(|_| err())?;
                        TokenKeep::Ratio(1.0 / denom)
                    }
                    Some(a) if a.starts_with('r') => TokenKeep::Ratio(a[1..].parse().map_err(|_| err())?),
                    Some(a) => TokenKeep::Count(a.parse().map_err(|_| err())?),
                };
                CompressionStrategy::Aks { keep }
            }
            _ => return Err(err()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Kept token indices of one frame, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub frame_index: usize,
    pub layer: usize,
    pub indices: Vec<usize>,
}

/// Per-token cosine against the same position in the previous frame; keeps
/// the `keep` least similar. Frames of different sizes are compared over
/// their common row-major prefix; tokens past it rank as most similar.
pub fn aks_select(keys: &Matrix, prev_keys: &Matrix, keep: usize) -> Result<Vec<usize>, EncodeError> {
    if keys.cols() != prev_keys.cols() {
        return Err(EncodeError::ShapeMismatch(format!(
            "adjacent frames have {} and {} key columns",
            keys.cols(),
            prev_keys.cols()
        )));
    }
    let n = keys.rows();
    let common = n.min(prev_keys.rows());
    let mut sims = vec![f64::INFINITY; n];
    for (i, s) in sims.iter_mut().enumerate().take(common) {
        *s = cosine_sim(keys.row(i), prev_keys.row(i))?;
    }
    let mut kept = bottom_k_asc(&sims, keep);
    kept.sort_unstable();
    Ok(kept)
}

/// Non-overlapping k×k mean pooling of keys and values over the token grid.
/// Edge cells average whatever tokens they cover.
pub fn pool_window_tokens(frame: &FrameKV, kernel: usize) -> (Matrix, Matrix) {
    let Grid { height, width } = frame.grid;
    let cols = frame.keys.cols();
    let (out_h, out_w) = (height.div_ceil(kernel), width.div_ceil(kernel));
    let mut keys = Vec::with_capacity(out_h * out_w * cols);
    let mut values = Vec::with_capacity(out_h * out_w * cols);
    let mut acc_k = vec![0.0f64; cols];
    let mut acc_v = vec![0.0f64; cols];
    for br in 0..out_h {
        for bc in 0..out_w {
            acc_k.iter_mut().for_each(|a| *a = 0.0);
            acc_v.iter_mut().for_each(|a| *a = 0.0);
            let mut count = 0usize;
            for r in br * kernel..((br + 1) * kernel).min(height) {
                for c in bc * kernel..((bc + 1) * kernel).min(width) {
                    let t = r * width + c;
                    for (a, &x) in acc_k.iter_mut().zip(frame.keys.row(t)) {
                        *a += x as f64;
                    }
                    for (a, &x) in acc_v.iter_mut().zip(frame.values.row(t)) {
                        *a += x as f64;
                    }
                    count += 1;
                }
            }
            let n = count as f64;
            keys.extend(acc_k.iter().map(|a| (a / n) as f32));
            values.extend(acc_v.iter().map(|a| (a / n) as f32));
        }
    }
    let rows = out_h * out_w;
    (
        Matrix::new(rows, cols, keys).expect("pooled keys are finite"),
        Matrix::new(rows, cols, values).expect("pooled values are finite"),
    )
}

/// Row-major indices of grid positions `(r·stride, c·stride)`.
pub fn dilated_select(grid: Grid, stride: usize) -> Vec<usize> {
    (0..grid.height)
        .step_by(stride)
        .flat_map(|r| (0..grid.width).step_by(stride).map(move |c| r * grid.width + c))
        .collect()
}

/// Floor of `linspace(0, window_len - 1, keep)`, deduplicated.
pub fn uniform_frame_select(window_len: usize, keep: usize) -> Vec<usize> {
    if window_len == 0 {
        return Vec::new();
    }
    if keep >= window_len {
        return (0..window_len).collect();
    }
    if keep <= 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..keep).map(|i| i * (window_len - 1) / (keep - 1)).collect();
    out.dedup();
    out
}

/// One bipartite soft-matching pass within a frame. Even-indexed tokens
/// propose their most similar odd-indexed token by key cosine; the `merges`
/// strongest proposals are averaged into their partners. Returns the
/// surviving tokens in original order, `N - merges` rows when enough
/// proposals exist.
pub fn token_merge(frame: &FrameKV, merges: usize) -> Result<(Matrix, Matrix), EncodeError> {
    let n = frame.tokens();
    if merges >= n && merges > 0 {
        return Err(EncodeError::IncompatibleStrategy(format!(
            "cannot merge {merges} of {n} tokens"
        )));
    }
    let set_a: Vec<usize> = (0..n).step_by(2).collect();
    let set_b: Vec<usize> = (1..n).step_by(2).collect();
    let merges = merges.min(set_a.len());
    if merges == 0 || set_b.is_empty() {
        return Ok((frame.keys.clone(), frame.values.clone()));
    }

    let mut proposals = Vec::with_capacity(set_a.len());
    for &a in &set_a {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &b in &set_b {
            let s = cosine_sim(frame.keys.row(a), frame.keys.row(b))?;
            if s > best.0 {
                best = (s, b);
            }
        }
        proposals.push((a, best.1, best.0));
    }
    let sims: Vec<f64> = proposals.iter().map(|p| p.2).collect();
    let order = crate::numerics::top_k_desc(&sims, merges);

    let cols = frame.keys.cols();
    // Partner of each merged A token, indexed by token.
    let mut target = vec![usize::MAX; n];
    for &p in &order {
        let (a, b, _) = proposals[p];
        target[a] = b;
    }
    let mut sum_k = vec![vec![0.0f64; cols]; n];
    let mut sum_v = vec![vec![0.0f64; cols]; n];
    let mut size = vec![0usize; n];
    for (t, &partner) in target.iter().enumerate() {
        let dst = if partner == usize::MAX { t } else { partner };
        for (acc, &x) in sum_k[dst].iter_mut().zip(frame.keys.row(t)) {
            *acc += x as f64;
        }
        for (acc, &x) in sum_v[dst].iter_mut().zip(frame.values.row(t)) {
            *acc += x as f64;
        }
        size[dst] += 1;
    }
    let mut keys = Vec::with_capacity((n - merges) * cols);
    let mut values = Vec::with_capacity((n - merges) * cols);
    for t in (0..n).filter(|&t| size[t] > 0) {
        let s = size[t] as f64;
        keys.extend(sum_k[t].iter().map(|x| (x / s) as f32));
        values.extend(sum_v[t].iter().map(|x| (x / s) as f32));
    }
    let rows = n - merges;
    Ok((Matrix::new(rows, cols, keys)?, Matrix::new(rows, cols, values)?))
}

/// Window positions kept by k-means over per-frame mean key vectors.
pub fn kmeans_frame_select(frame_means: &[&[f32]], centroids: usize) -> Vec<usize> {
    kmeans_select(frame_means, centroids)
}

/// Frame 0 is always kept; the remaining `keep - 1` slots go to the frames
/// with the lowest mean token cosine against their predecessor.
pub fn temporal_change_select(window_keys: &[&Matrix], keep: usize) -> Result<Vec<usize>, EncodeError> {
    let len = window_keys.len();
    if keep >= len {
        return Ok((0..len).collect());
    }
    if keep == 0 {
        return Ok(Vec::new());
    }
    let mut scores = Vec::with_capacity(len - 1);
    for pair in window_keys.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        if prev.cols() != cur.cols() {
            return Err(EncodeError::ShapeMismatch(format!(
                "adjacent frames have {} and {} key columns",
                prev.cols(),
                cur.cols()
            )));
        }
        let common = prev.rows().min(cur.rows());
        let mut total = 0.0;
        for n in 0..common {
            total += cosine_sim(cur.row(n), prev.row(n))?;
        }
        scores.push(total / common as f64);
    }
    let mut kept: Vec<usize> = std::iter::once(0)
        .chain(bottom_k_asc(&scores, keep - 1).into_iter().map(|p| p + 1))
        .collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Smallest stride whose dilated grid keeps at most `keep` tokens.
pub(crate) fn stride_for_budget(grid: Grid, keep: usize) -> usize {
    let longest = grid.height.max(grid.width).max(1);
    (1..=longest)
        .find(|&s| grid.height.div_ceil(s) * grid.width.div_ceil(s) <= keep)
        .unwrap_or(longest)
}
