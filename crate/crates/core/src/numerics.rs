//! Dense numerical kernels shared by the encoder, store and retrieval paths.
//!
//! Storage is `f32`; reductions (dot products, softmax normalizers, means)
//! accumulate in `f64` and round once at the end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equal-length rows. An empty iterator yields a `0 x cols` matrix.
    pub fn from_rows<'a, I>(cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut count = 0;
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::DimensionMismatch(format!(
                    "row of length {} in a matrix with {cols} columns",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
            count += 1;
        }
        Matrix::new(count, cols, data)
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn vstack(cols: usize, parts: &[&Matrix]) -> Result<Self> {
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(NumericsError::DimensionMismatch(format!(
                    "cannot stack {} columns onto {cols}",
                    part.cols
                )));
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        let width = self.cols.max(1);
        self.data
            .chunks_exact(width)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column block `[start, start + width)` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns `[start, start + block.cols)`.
    pub(crate) fn set_column_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "cosine of {}-dim and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(logits: &[f32]) -> Result<Vec<f32>> {
    let wide: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    Ok(softmax_f64(&wide)?.into_iter().map(|p| p as f32).collect())
}

pub(crate) fn softmax_f64(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(NumericsError::Empty("softmax of an empty row"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Output and row-stochastic weights of one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Matrix,
    pub weights: Matrix,
}

/// `softmax(Q Kᵀ / √d) V`, scaled by the per-head width `d = Q.cols`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Attention> {
    let mut weights = Matrix::zeros(q.rows, k.rows);
    let output = attend(q, k, v, |i, _, w| {
        for (dst, &p) in weights.data[i * k.rows..(i + 1) * k.rows].iter_mut().zip(w) {
            *dst = p as f32;
        }
    })?;
    Ok(Attention { output, weights })
}

/// Attention core. `visit` sees each query row's scaled logits and weights
/// at full precision.
pub(crate) fn attend<F>(q: &Matrix, k: &Matrix, v: &Matrix, mut visit: F) -> Result<Matrix>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    if q.cols != k.cols {
        return Err(NumericsError::DimensionMismatch(format!(
            "query width {} vs key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(NumericsError::DimensionMismatch(format!(
            "{} keys vs {} values",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 {
        return Err(NumericsError::Empty("attention over zero keys"));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut output = Matrix::zeros(q.rows, v.cols);
    let mut logits = vec![0.0f64; k.rows];
    let mut acc = vec![0.0f64; v.cols];
    for (i, qrow) in q.row_iter().enumerate() {
        for (logit, krow) in logits.iter_mut().zip(k.row_iter()) {
            *logit = dot(qrow, krow) * scale;
        }
        let w = softmax_f64(&logits)?;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&p, vrow) in w.iter().zip(v.row_iter()) {
            for (a, &x) in acc.iter_mut().zip(vrow) {
                *a += p * x as f64;
            }
        }
        for (dst, &a) in output.data[i * v.cols..(i + 1) * v.cols].iter_mut().zip(&acc) {
            *dst = a as f32;
        }
        visit(i, &logits, &w);
    }
    Ok(output)
}

pub fn mean_pool_rows(x: &Matrix) -> Result<Vec<f32>> {
    if x.rows == 0 {
        return Err(NumericsError::Empty("mean of zero rows"));
    }
    let mut acc = vec![0.0f64; x.cols];
    for row in x.row_iter() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = x.rows as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Shannon entropy divided by `ln n`; `0 · ln 0` counts as 0.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(NumericsError::NotADistribution(format!(
            "need at least 2 outcomes, got {}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(NumericsError::NotADistribution("negative or non-finite mass".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(NumericsError::NotADistribution(format!("mass sums to {total}")));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok((h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Indices of the `k` largest scores, descending; ties go to the smaller index.
pub fn top_k_desc<T: PartialOrd + Copy>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    idx
}

/// Indices of the `k` smallest scores, ascending by score; ties go to the smaller index.
pub fn bottom_k_asc<T: PartialOrd + Copy>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    idx
}
