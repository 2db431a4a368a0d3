//! Retrieval and encoding diagnostics: recall against clue frames,
//! layer-wise recall spread, query–frame score traces, representative-vector
//! self-similarity and window-entropy histograms.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncodeTrace;
use crate::numerics::{cosine_sim, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("question {0}: empty clue set")]
    EmptyClue(String),
    #[error("question {question}: clue frame {frame} outside 0..{frames}")]
    ClueOutOfRange {
        question: String,
        frame: usize,
        frames: usize,
    },
    #[error("inconsistent input: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Default raw frames per frame feature.
pub const DEFAULT_TEMPORAL_PATCH: usize = 2;

/// Ground-truth frame-feature indices for one question, ascending and unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClueAnnotation {
    pub question_id: String,
    pub frames: Vec<usize>,
}

impl ClueAnnotation {
    pub fn new(question_id: String, frames: Vec<usize>, frame_count: usize) -> Result<Self> {
        let set: BTreeSet<usize> = frames.into_iter().collect();
        if set.is_empty() {
            return Err(AnalysisError::EmptyClue(question_id));
        }
        if let Some(&frame) = set.iter().find(|&&f| f >= frame_count) {
            return Err(AnalysisError::ClueOutOfRange {
                question: question_id,
                frame,
                frames: frame_count,
            });
        }
        Ok(Self {
            question_id,
            frames: set.into_iter().collect(),
        })
    }

    /// Maps raw video frame indices to frame features (`raw / temporal_patch`).
    pub fn from_raw_frames(
        question_id: String,
        raw_frames: &[usize],
        temporal_patch: usize,
        frame_count: usize,
    ) -> Result<Self> {
        if temporal_patch == 0 {
            return Err(AnalysisError::Inconsistent("temporal patch must be >= 1".into()));
        }
        Self::new(
            question_id,
            raw_frames.iter().map(|r| r / temporal_patch).collect(),
            frame_count,
        )
    }
}

/// `|retrieved ∩ clue| / |clue|`.
pub fn recall_at_k(retrieved: &[usize], clue: &[usize]) -> Result<f64> {
    let clue: BTreeSet<usize> = clue.iter().copied().collect();
    if clue.is_empty() {
        return Err(AnalysisError::EmptyClue(String::new()));
    }
    let retrieved: BTreeSet<usize> = retrieved.iter().copied().collect();
    Ok(clue.intersection(&retrieved).count() as f64 / clue.len() as f64)
}

/// Linear-interpolation quantile of sorted data (median of an even count is
/// the midpoint of the central pair).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Order statistics per layer over questions. `recalls[q][layer]`.
pub fn layer_recall_distribution(recalls: &[Vec<f64>]) -> Result<Vec<LayerSummary>> {
    let Some(first) = recalls.first() else {
        return Ok(Vec::new());
    };
    let layers = first.len();
    if recalls.iter().any(|r| r.len() != layers) {
        return Err(AnalysisError::Inconsistent(
            "questions report different layer counts".into(),
        ));
    }
    Ok((0..layers)
        .map(|layer| {
            let mut xs: Vec<f64> = recalls.iter().map(|r| r[layer]).collect();
            xs.sort_by(f64::total_cmp);
            LayerSummary {
                layer,
                count: xs.len(),
                mean: xs.iter().sum::<f64>() / xs.len() as f64,
                median: quantile(&xs, 0.5),
                q1: quantile(&xs, 0.25),
                q3: quantile(&xs, 0.75),
                min: xs[0],
                max: xs[xs.len() - 1],
            }
        })
        .collect())
}

/// Query–frame scores over stream time with clue markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub question_id: String,
    pub expert: String,
    pub scores: Vec<f64>,
    pub is_clue: Vec<bool>,
    /// Inclusive `[start, end]` runs of consecutive clue frames.
    pub clue_intervals: Vec<[usize; 2]>,
}

pub fn score_trace(expert: &str, scores: &[f64], clue: &ClueAnnotation) -> ScoreTrace {
    let mut is_clue = vec![false; scores.len()];
    for &f in clue.frames.iter().filter(|&&f| f < scores.len()) {
        is_clue[f] = true;
    }
    let mut clue_intervals: Vec<[usize; 2]> = Vec::new();
    for &f in &clue.frames {
        match clue_intervals.last_mut() {
            Some(run) if run[1] + 1 == f => run[1] = f,
            _ => clue_intervals.push([f, f]),
        }
    }
    ScoreTrace {
        question_id: clue.question_id.clone(),
        expert: expert.to_string(),
        scores: scores.to_vec(),
        is_clue,
        clue_intervals,
    }
}

/// Pairwise cosine of representative vectors; each unordered pair is
/// computed once, so the result is exactly symmetric.
pub fn self_similarity(reps: &[&[f32]]) -> Result<Matrix> {
    let t = reps.len();
    let mut data = vec![0.0f32; t * t];
    for a in 0..t {
        for b in a..t {
            let s = cosine_sim(reps[a], reps[b])? as f32;
            data[a * t + b] = s;
            data[b * t + a] = s;
        }
    }
    Ok(Matrix::new(t, t, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Equal-width bins over `[0, 1]`; 1.0 lands in the last bin.
pub fn histogram(values: impl IntoIterator<Item = f64>, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(AnalysisError::Inconsistent("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0usize; bins];
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(AnalysisError::Inconsistent(format!("value {v} outside [0, 1]")));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
    })
}

/// Histogram of the per-window entropies recorded during encoding.
pub fn entropy_histogram(trace: &EncodeTrace, bins: usize) -> Result<Histogram> {
    histogram(trace.entropies(), bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecall {
    pub question_id: String,
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub matrix: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub budget: usize,
    pub questions: Vec<QuestionRecall>,
    pub layer_recall: Vec<LayerSummary>,
    /// Mean over every (question, layer) pair.
    pub mean_recall_joint: f64,
    /// Mean over questions of each question's layer-averaged recall.
    pub mean_recall_question_first: f64,
    pub score_traces: Vec<ScoreTrace>,
    pub similarity: Vec<LayerSimilarity>,
    pub entropy_histogram: Option<Histogram>,
}

/// Aggregates per-question, per-layer recalls into a report skeleton;
/// traces, similarity matrices and the histogram are attached by the caller.
pub fn summarize_recalls(budget: usize, questions: Vec<QuestionRecall>) -> Result<AnalysisReport> {
    let grid: Vec<Vec<f64>> = questions.iter().map(|q| q.per_layer.clone()).collect();
    let layer_recall = layer_recall_distribution(&grid)?;
    let pairs: Vec<f64> = grid.iter().flatten().copied().collect();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let question_means: Vec<f64> = questions.iter().map(|q| q.mean).collect();
    Ok(AnalysisReport {
        budget,
        mean_recall_joint: mean(&pairs),
        mean_recall_question_first: mean(&question_means),
        questions,
        layer_recall,
        score_traces: Vec::new(),
        similarity: Vec::new(),
        entropy_histogram: None,
    })
}

impl QuestionRecall {
    pub fn new(question_id: String, per_layer: Vec<f64>) -> Self {
        let mean = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().sum::<f64>() / per_layer.len() as f64
        };
        Self {
            question_id,
            per_layer,
            mean,
        }
    }
}
