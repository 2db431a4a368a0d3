//! Question-time frame retrieval.
//!
//! Internal experts score frames per layer by cosine between the mean
//! question query and each frame's representative key vector. The external
//! expert scores frames by cosine between standalone question and frame
//! embeddings. Mixture-of-experts retrieval fuses each layer's internal
//! ranking with the external one by reciprocal rank fusion (or, as a
//! baseline, by concatenating L2-normalized embeddings).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{window_attention, EncodeError, LayerQkv};
use crate::kv_store::{StoreError, TieredCacheStore};
use crate::numerics::{cosine_sim, dot, mean_pool_rows, norm, top_k_desc, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("rankings cover different frame counts: {0} vs {1}")]
    InconsistentRankings(usize, usize),
    #[error("no rankings to fuse")]
    NoRankings,
    #[error("unknown question '{0}'")]
    UnknownQuestion(String),
    #[error("mode {0} requires {1}")]
    MissingInput(RetrievalMode, &'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} weights for {1} rankings")]
    WeightCount(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub const DEFAULT_RRF_K: f64 = 60.0;
pub const DEFAULT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    Layer(usize),
    External(String),
}

impl fmt::Display for Expert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expert::Layer(i) => write!(f, "layer{i}"),
            Expert::External(name) => write!(f, "external:{name}"),
        }
    }
}

/// One expert's scores and the 1-based rank each frame receives
/// (descending score, ties to the smaller frame index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub expert: Expert,
    pub scores: Vec<f64>,
    pub rank_of: Vec<usize>,
}

impl Ranking {
    pub fn from_scores(expert: Expert, scores: Vec<f64>) -> Self {
        let order = top_k_desc(&scores, scores.len());
        let mut rank_of = vec![0; scores.len()];
        for (pos, &frame) in order.iter().enumerate() {
            rank_of[frame] = pos + 1;
        }
        Self {
            expert,
            scores,
            rank_of,
        }
    }

    pub fn len(&self) -> usize {
        self.rank_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank_of.is_empty()
    }
}

/// Frame and question embeddings from a standalone encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    pub name: String,
    /// `T × d`, row `t` embeds frame feature `t`.
    pub frames: Matrix,
    pub questions: BTreeMap<String, Vec<f32>>,
}

impl ExternalEmbeddings {
    pub fn new(name: String, frames: Matrix, questions: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        if let Some((id, q)) = questions.iter().find(|(_, q)| q.len() != frames.cols()) {
            return Err(RetrievalError::DimensionMismatch(format!(
                "question '{id}' embedding has {} dims, frames have {}",
                q.len(),
                frames.cols()
            )));
        }
        Ok(Self {
            name,
            frames,
            questions,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }
}

/// A question's own per-layer Q/K/V.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionFeatures {
    pub id: String,
    pub layers: Vec<LayerQkv>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Internal,
    External,
    #[default]
    Moe,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Internal => "internal",
            RetrievalMode::External => "external",
            RetrievalMode::Moe => "moe",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "internal" => Ok(RetrievalMode::Internal),
            "external" => Ok(RetrievalMode::External),
            "moe" => Ok(RetrievalMode::Moe),
            _ => Err(format!("unknown retrieval mode '{s}' (internal|external|moe)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Rrf,
    L2concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Rrf => "rrf",
            Fusion::L2concat => "l2concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rrf" => Ok(Fusion::Rrf),
            "l2concat" | "l2-concat" => Ok(Fusion::L2concat),
            _ => Err(format!("unknown fusion '{s}' (rrf|l2concat)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub fusion: Fusion,
    /// Frame features kept per layer.
    pub budget: usize,
    pub rrf_k: f64,
    pub internal_weight: f64,
    pub external_weight: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Moe,
            fusion: Fusion::Rrf,
            budget: DEFAULT_BUDGET,
            rrf_k: DEFAULT_RRF_K,
            internal_weight: 1.0,
            external_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRetrieval {
    pub layer: usize,
    /// Retrieved frame indices, ascending.
    pub frames: Vec<usize>,
    /// Scores the selection was made on (fused under MoE).
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub question_id: String,
    pub mode: RetrievalMode,
    pub fusion: Fusion,
    pub layers: Vec<LayerRetrieval>,
}

/// Mean of the question's query rows at one layer.
pub fn question_repr(queries: &Matrix) -> Result<Vec<f32>> {
    Ok(mean_pool_rows(queries)?)
}

/// Cosine of `q̄` against every representative vector of `layer`.
pub fn internal_scores(store: &TieredCacheStore, layer: usize, question: &[f32]) -> Result<Vec<f64>> {
    store
        .rep_matrix(layer)?
        .into_iter()
        .map(|rep| Ok(cosine_sim(question, rep)?))
        .collect()
}

pub fn external_scores(emb: &ExternalEmbeddings, question_id: &str) -> Result<Vec<f64>> {
    let q = emb
        .questions
        .get(question_id)
        .ok_or_else(|| RetrievalError::UnknownQuestion(question_id.to_string()))?;
    emb.frames.row_iter().map(|x| Ok(cosine_sim(q, x)?)).collect()
}

/// `score(t) = Σ_r w_r / (rrf_k + rank_r(t))` with 1-based ranks.
pub fn rrf_fuse(rankings: &[Ranking], rrf_k: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = rankings.first().ok_or(RetrievalError::NoRankings)?;
    if let Some(r) = rankings.iter().find(|r| r.len() != first.len()) {
        return Err(RetrievalError::InconsistentRankings(first.len(), r.len()));
    }
    if let Some(w) = weights {
        if w.len() != rankings.len() {
            return Err(RetrievalError::WeightCount(w.len(), rankings.len()));
        }
    }
    let mut fused = vec![0.0; first.len()];
    for (i, ranking) in rankings.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        for (score, &rank) in fused.iter_mut().zip(&ranking.rank_of) {
            *score += w / (rrf_k + rank as f64);
        }
    }
    Ok(fused)
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(NumericsError::ZeroNorm.into());
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Cosine between concatenations of per-modality unit vectors.
pub fn l2_concat_fuse(
    internal_question: &[f32],
    reps: &[&[f32]],
    external_question: &[f32],
    frame_embeddings: &Matrix,
) -> Result<Vec<f64>> {
    if reps.len() != frame_embeddings.rows() {
        return Err(RetrievalError::InconsistentRankings(
            reps.len(),
            frame_embeddings.rows(),
        ));
    }
    let mut q = unit(internal_question)?;
    q.extend(unit(external_question)?);
    reps.iter()
        .zip(frame_embeddings.row_iter())
        .map(|(rep, emb)| {
            let mut f = unit(rep)?;
            f.extend(unit(emb)?);
            if f.len() != q.len() {
                return Err(RetrievalError::DimensionMismatch(format!(
                    "concatenated frame has {} dims, question {}",
                    f.len(),
                    q.len()
                )));
            }
            Ok((dot(&q, &f) / (norm(&q) * norm(&f))).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Raw per-expert scores for one question.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpertScores {
    /// Per layer, when internal scoring ran.
    pub internal: Option<Vec<Vec<f64>>>,
    pub external: Option<Vec<f64>>,
}

pub fn expert_scores(
    store: &TieredCacheStore,
    emb: Option<&ExternalEmbeddings>,
    question: &QuestionFeatures,
    mode: RetrievalMode,
) -> Result<ExpertScores> {
    let internal = if mode == RetrievalMode::External {
        None
    } else {
        if question.layers.len() != store.layer_count() {
            return Err(RetrievalError::DimensionMismatch(format!(
                "question has {} layers, store has {}",
                question.layers.len(),
                store.layer_count()
            )));
        }
        Some(
            question
                .layers
                .iter()
                .enumerate()
                .map(|(layer, qkv)| internal_scores(store, layer, &question_repr(&qkv.queries)?))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let external = match (mode, emb) {
        (RetrievalMode::Internal, _) => None,
        (_, Some(emb)) => {
            if emb.frame_count() != store.frame_count() {
                return Err(RetrievalError::InconsistentRankings(
                    emb.frame_count(),
                    store.frame_count(),
                ));
            }
            Some(external_scores(emb, &question.id)?)
        }
        (_, None) => return Err(RetrievalError::MissingInput(mode, "external embeddings")),
    };
    Ok(ExpertScores { internal, external })
}

/// Ranks, fuses (RRF under MoE) and keeps the top `budget` frames per layer.
pub fn rank_and_select(
    question_id: &str,
    scores: &ExpertScores,
    layer_count: usize,
    config: &RetrievalConfig,
) -> Result<RetrievalResult> {
    let layer_scores: Vec<Vec<f64>> = match config.mode {
        RetrievalMode::Internal => scores
            .internal
            .clone()
            .ok_or(RetrievalError::MissingInput(config.mode, "internal scores"))?,
        RetrievalMode::External => {
            let ext = scores
                .external
                .as_ref()
                .ok_or(RetrievalError::MissingInput(config.mode, "external scores"))?;
            vec![ext.clone(); layer_count]
        }
        RetrievalMode::Moe => {
            let internal = scores
                .internal
                .as_ref()
                .ok_or(RetrievalError::MissingInput(config.mode, "internal scores"))?;
            let external = Ranking::from_scores(
                Expert::External("external".into()),
                scores
                    .external
                    .clone()
                    .ok_or(RetrievalError::MissingInput(config.mode, "external scores"))?,
            );
            internal
                .iter()
                .enumerate()
                .map(|(layer, s)| {
                    let rankings = [Ranking::from_scores(Expert::Layer(layer), s.clone()), external.clone()];
                    rrf_fuse(
                        &rankings,
                        config.rrf_k,
                        Some(&[config.internal_weight, config.external_weight]),
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(select(question_id, layer_scores, config))
}

fn select(question_id: &str, layer_scores: Vec<Vec<f64>>, config: &RetrievalConfig) -> RetrievalResult {
    RetrievalResult {
        question_id: question_id.to_string(),
        mode: config.mode,
        fusion: config.fusion,
        layers: layer_scores
            .into_iter()
            .enumerate()
            .map(|(layer, scores)| {
                let mut frames = top_k_desc(&scores, config.budget);
                frames.sort_unstable();
                LayerRetrieval { layer, frames, scores }
            })
            .collect(),
    }
}

/// Top-`budget` frames per layer for one question.
pub fn retrieve(
    store: &TieredCacheStore,
    emb: Option<&ExternalEmbeddings>,
    question: &QuestionFeatures,
    config: &RetrievalConfig,
) -> Result<RetrievalResult> {
    if config.mode == RetrievalMode::Moe && config.fusion == Fusion::L2concat {
        let emb = emb.ok_or(RetrievalError::MissingInput(config.mode, "external embeddings"))?;
        let q_ext = emb
            .questions
            .get(&question.id)
            .ok_or_else(|| RetrievalError::UnknownQuestion(question.id.clone()))?;
        let layer_scores = question
            .layers
            .iter()
            .enumerate()
            .map(|(layer, qkv)| {
                let reps = store.rep_matrix(layer)?;
                l2_concat_fuse(&question_repr(&qkv.queries)?, &reps, q_ext, &emb.frames)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(select(&question.id, layer_scores, config));
    }
    let scores = expert_scores(store, emb, question, config.mode)?;
    rank_and_select(&question.id, &scores, store.layer_count(), config)
}

/// Per layer: attention from the question over `[retrieved frames ; question]`.
pub fn answer_attention(
    store: &TieredCacheStore,
    question: &QuestionFeatures,
    result: &RetrievalResult,
) -> Result<Vec<Matrix>> {
    let (h, d) = (store.head_count(), store.head_dim());
    let width = h * d;
    question
        .layers
        .iter()
        .enumerate()
        .map(|(layer, qkv)| {
            let frames = result.layers.get(layer).map(|l| l.frames.as_slice()).unwrap_or(&[]);
            let fetched = store.fetch_frames(layer, frames)?;
            let keys: Vec<&Matrix> = fetched.iter().map(|f| &f.keys).collect();
            let values: Vec<&Matrix> = fetched.iter().map(|f| &f.values).collect();
            let rk = Matrix::vstack(width, &keys)?;
            let rv = Matrix::vstack(width, &values)?;
            let window = (rk.rows() > 0).then_some((&rk, &rv));
            Ok(window_attention(&qkv.queries, window, &qkv.keys, &qkv.values, h, d)?.output)
        })
        .collect()
}
