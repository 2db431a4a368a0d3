//! Seeded stand-in for the multimodal model and the external encoders.
//!
//! Every random table is drawn from a ChaCha stream keyed by
//! `(seed, index, role)`, so outputs are identical across runs and
//! platforms. Query and key projections share a base matrix (with a small
//! per-layer perturbation on the query side) so that query–key similarity
//! tracks input similarity, which is what makes planted clue frames
//! retrievable from the KV features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, ClueAnnotation};
use crate::encoder::{FrameInput, LayerQkv};
use crate::kv_store::Grid;
use crate::numerics::{norm, Matrix};

#[derive(Debug, Error)]
pub enum ToyModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid clue spec: {0}")]
    InvalidClue(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, ToyModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSchedule {
    Fixed(Grid),
    PerFrame(Vec<Grid>),
}

impl TokenSchedule {
    /// Grid of frame `t`; a per-frame schedule repeats cyclically.
    pub fn grid_for(&self, t: usize) -> Grid {
        match self {
            TokenSchedule::Fixed(g) => *g,
            TokenSchedule::PerFrame(gs) => gs[t % gs.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub tokens: TokenSchedule,
    pub input_dim: usize,
    pub external_dim: usize,
    pub question_tokens: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 28,
            heads: 4,
            head_dim: 128,
            tokens: TokenSchedule::Fixed(Grid::new(16, 16)),
            input_dim: 64,
            external_dim: 64,
            question_tokens: 8,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("input_dim", self.input_dim),
            ("external_dim", self.external_dim),
            ("question_tokens", self.question_tokens),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ToyModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        let grids: Vec<Grid> = match &self.tokens {
            TokenSchedule::Fixed(g) => vec![*g],
            TokenSchedule::PerFrame(gs) => gs.clone(),
        };
        if grids.is_empty() || grids.iter().any(|g| g.tokens() == 0) {
            return Err(ToyModelError::InvalidConfig("empty token grid".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Role {
    KeyBase = 1,
    QueryPerturb = 2,
    Value = 3,
    FramePosition = 4,
    QuestionPosition = 5,
    External = 6,
    Base = 7,
    Drift = 8,
    Concept = 9,
    Clue = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn keyed_rng(seed: u64, index: u64, role: Role) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ index) ^ role as u64);
    ChaCha8Rng::seed_from_u64(key)
}

/// Entries uniform on `[-a, a)` with unit variance scaled by `1/√fan_in`.
fn random_table(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let a = (3.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-a..a)).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| (x as f64 / n) as f32).collect();
        }
    }
}

const QUERY_PERTURBATION: f32 = 0.1;
const POSITION_SCALE: f32 = 0.25;

/// Fixed random projections for every layer plus the external encoder.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    /// Per layer: `(W_q, W_k, W_v)`, each `input_dim × (H·D)` row-major.
    projections: Vec<[Vec<f32>; 3]>,
    external: Vec<f32>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let (din, width) = (config.input_dim, config.width());
        let projections = (0..config.layers as u64)
            .map(|layer| {
                let wk = random_table(&mut keyed_rng(config.seed, layer, Role::KeyBase), din * width, din);
                let perturb = random_table(&mut keyed_rng(config.seed, layer, Role::QueryPerturb), din * width, din);
                let wq = wk
                    .iter()
                    .zip(&perturb)
                    .map(|(k, p)| k + QUERY_PERTURBATION * p)
                    .collect();
                let wv = random_table(&mut keyed_rng(config.seed, layer, Role::Value), din * width, din);
                [wq, wk, wv]
            })
            .collect();
        let external = random_table(
            &mut keyed_rng(config.seed, 0, Role::External),
            din * config.external_dim,
            din,
        );
        Ok(Self {
            config,
            projections,
            external,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.config.input_dim {
            return Err(ToyModelError::DimensionMismatch {
                expected: self.config.input_dim,
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Token rows: the input plus a small per-position offset.
    fn expand(&self, input: &[f32], tokens: usize, role: Role) -> Vec<Vec<f32>> {
        (0..tokens as u64)
            .map(|n| {
                let mut rng = keyed_rng(self.config.seed, n, role);
                let pos = random_table(&mut rng, input.len(), input.len());
                input.iter().zip(pos).map(|(x, p)| x + POSITION_SCALE * p).collect()
            })
            .collect()
    }

    fn project(&self, rows: &[Vec<f32>], layer: usize) -> LayerQkv {
        let width = self.config.width();
        let apply = |w: &[f32]| {
            let mut out = Vec::with_capacity(rows.len() * width);
            for row in rows {
                let mut acc = vec![0.0f64; width];
                for (i, &x) in row.iter().enumerate() {
                    let wrow = &w[i * width..(i + 1) * width];
                    for (a, &wij) in acc.iter_mut().zip(wrow) {
                        *a += x as f64 * wij as f64;
                    }
                }
                out.extend(acc.into_iter().map(|a| a as f32));
            }
            Matrix::new(rows.len(), width, out).expect("finite projections")
        };
        let [wq, wk, wv] = &self.projections[layer];
        LayerQkv {
            queries: apply(wq),
            keys: apply(wk),
            values: apply(wv),
        }
    }

    /// Q, K, V (`N × H·D`) of one frame at one layer.
    pub fn project_frame(&self, input: &[f32], layer: usize, grid: Grid) -> Result<LayerQkv> {
        self.check_input(input)?;
        if layer >= self.config.layers {
            return Err(ToyModelError::InvalidConfig(format!("layer {layer} out of range")));
        }
        let rows = self.expand(input, grid.tokens(), Role::FramePosition);
        Ok(self.project(&rows, layer))
    }

    /// All layers of frame `t`.
    pub fn frame_input(&self, frame_index: usize, input: &[f32], grid: Grid) -> Result<FrameInput> {
        self.check_input(input)?;
        let rows = self.expand(input, grid.tokens(), Role::FramePosition);
        Ok(FrameInput {
            frame_index,
            grid,
            layers: (0..self.config.layers).map(|l| self.project(&rows, l)).collect(),
        })
    }

    /// Per-layer Q, K, V of a question built from its concept vector.
    pub fn project_question(&self, concept: &[f32]) -> Result<Vec<LayerQkv>> {
        self.check_input(concept)?;
        let rows = self.expand(concept, self.config.question_tokens, Role::QuestionPosition);
        Ok((0..self.config.layers).map(|l| self.project(&rows, l)).collect())
    }

    /// Unit-norm external embedding (a zero projection stays zero).
    pub fn external_encode(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.check_input(input)?;
        let d = self.config.external_dim;
        let mut acc = vec![0.0f64; d];
        for (i, &x) in input.iter().enumerate() {
            for (a, &w) in acc.iter_mut().zip(&self.external[i * d..(i + 1) * d]) {
                *a += x as f64 * w as f64;
            }
        }
        let n = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n = if n > 0.0 { n } else { 1.0 };
        Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub frames: usize,
    /// Clue frame-feature indices, one list per question.
    pub clues: Vec<Vec<usize>>,
    /// Weight of the planted concept relative to the unit-norm base signal.
    pub margin: f32,
    /// Correlation between consecutive base signals; 1.0 freezes the stream.
    pub redundancy: f32,
    pub input_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuestion {
    pub id: String,
    pub concept: Vec<f32>,
    pub clue: ClueAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub features: Vec<Vec<f32>>,
    pub questions: Vec<SyntheticQuestion>,
    pub margin: f32,
    pub redundancy: f32,
}

/// Margin at or above which planted frames are reliably retrieved at
/// `input_dim >= 32` and `H·D >= 64` (checked by the test suite).
pub const SEPARABLE_MARGIN: f32 = 3.0;

/// A drifting unit-norm base signal with each question's concept vector
/// added at its clue frames.
pub fn gen_benchmark(spec: &BenchmarkSpec) -> Result<SyntheticBenchmark> {
    if spec.frames == 0 {
        return Err(ToyModelError::InvalidClue("benchmark needs at least one frame".into()));
    }
    if spec.input_dim == 0 {
        return Err(ToyModelError::InvalidConfig("input_dim must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.redundancy) {
        return Err(ToyModelError::InvalidConfig(format!(
            "redundancy {} outside [0, 1]",
            spec.redundancy
        )));
    }
    if !spec.margin.is_finite() || spec.margin < 0.0 {
        return Err(ToyModelError::InvalidConfig(format!(
            "margin {} must be >= 0",
            spec.margin
        )));
    }
    let dim = spec.input_dim;
    let rho = spec.redundancy as f64;
    let fresh = (1.0 - rho * rho).max(0.0).sqrt();

    let mut base = unit_vector(&mut keyed_rng(spec.seed, 0, Role::Base), dim);
    let mut features = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 && fresh > 0.0 {
            let noise = unit_vector(&mut keyed_rng(spec.seed, t as u64, Role::Drift), dim);
            let next: Vec<f32> = base
                .iter()
                .zip(&noise)
                .map(|(&b, &n)| (rho * b as f64 + fresh * n as f64) as f32)
                .collect();
            let n = norm(&next);
            base = next.into_iter().map(|x| (x as f64 / n) as f32).collect();
        }
        features.push(base.clone());
    }

    let mut questions = Vec::with_capacity(spec.clues.len());
    for (q, clue) in spec.clues.iter().enumerate() {
        if let Some(&bad) = clue.iter().find(|&&c| c >= spec.frames) {
            return Err(ToyModelError::InvalidClue(format!(
                "question {q}: clue frame {bad} >= {} frames",
                spec.frames
            )));
        }
        let id = format!("q{q:03}");
        let clue = ClueAnnotation::new(id.clone(), clue.clone(), spec.frames)?;
        let concept = unit_vector(&mut keyed_rng(spec.seed, q as u64, Role::Concept), dim);
        for &t in &clue.frames {
            for (f, c) in features[t].iter_mut().zip(&concept) {
                *f += spec.margin * c;
            }
        }
        questions.push(SyntheticQuestion { id, concept, clue });
    }
    Ok(SyntheticBenchmark {
        features,
        questions,
        margin: spec.margin,
        redundancy: spec.redundancy,
    })
}

/// Contiguous clue runs of `clue_len` frames at seeded positions.
pub fn random_clue_spec(frames: usize, questions: usize, clue_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clue_len == 0 || clue_len > frames {
        return Err(ToyModelError::InvalidClue(format!(
            "clue length {clue_len} does not fit in {frames} frames"
        )));
    }
    Ok((0..questions as u64)
        .map(|q| {
            let start = keyed_rng(seed, q, Role::Clue).gen_range(0..=frames - clue_len);
            (start..start + clue_len).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::self_similarity;
    use crate::numerics::{cosine_sim, top_k_desc};

    fn small_config() -> ToyModelConfig {
        ToyModelConfig {
            layers: 3,
            heads: 2,
            head_dim: 8,
            tokens: TokenSchedule::Fixed(Grid::new(2, 3)),
            input_dim: 16,
            external_dim: 12,
            question_tokens: 4,
            seed: 42,
        }
    }

    #[test]
    fn projection_is_deterministic_and_shaped() {
        let a = ToyModel::new(small_config()).unwrap();
        let b = ToyModel::new(small_config()).unwrap();
        let input: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).cos()).collect();
        let x = a.project_frame(&input, 1, Grid::new(2, 3)).unwrap();
        let y = b.project_frame(&input, 1, Grid::new(2, 3)).unwrap();
        assert_eq!(x, y);
        for m in [&x.queries, &x.keys, &x.values] {
            assert_eq!((m.rows(), m.cols()), (6, 16));
        }
        let other = a.project_frame(&input, 2, Grid::new(2, 3)).unwrap();
        assert_ne!(x.keys, other.keys);
        assert!(a.project_frame(&input[..3], 0, Grid::new(1, 1)).is_err());
    }

    #[test]
    fn external_encoding_is_unit_norm() {
        let m = ToyModel::new(small_config()).unwrap();
        let input: Vec<f32> = (0..16).map(|i| i as f32 - 7.5).collect();
        let e = m.external_encode(&input).unwrap();
        assert_eq!(e.len(), 12);
        assert!((norm(&e) - 1.0).abs() < 1e-6);
        assert_eq!(e, m.external_encode(&input).unwrap());
    }

    #[test]
    fn benchmark_is_seed_deterministic() {
        let spec = BenchmarkSpec {
            frames: 20,
            clues: random_clue_spec(20, 3, 2, 5).unwrap(),
            margin: 3.0,
            redundancy: 0.9,
            input_dim: 16,
            seed: 5,
        };
        assert_eq!(gen_benchmark(&spec).unwrap(), gen_benchmark(&spec).unwrap());
        let other = BenchmarkSpec {
            seed: 6,
            ..spec.clone()
        };
        assert_ne!(gen_benchmark(&spec).unwrap(), gen_benchmark(&other).unwrap());
    }

    #[test]
    fn full_redundancy_freezes_the_stream() {
        let spec = BenchmarkSpec {
            frames: 6,
            clues: vec![],
            margin: 3.0,
            redundancy: 1.0,
            input_dim: 8,
            seed: 1,
        };
        let b = gen_benchmark(&spec).unwrap();
        let refs: Vec<&[f32]> = b.features.iter().map(Vec::as_slice).collect();
        let sim = self_similarity(&refs).unwrap();
        assert!(sim.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn invalid_clues_are_rejected() {
        let spec = BenchmarkSpec {
            frames: 4,
            clues: vec![vec![1, 4]],
            margin: 1.0,
            redundancy: 0.5,
            input_dim: 8,
            seed: 0,
        };
        assert!(matches!(gen_benchmark(&spec), Err(ToyModelError::InvalidClue(_))));
        let empty = BenchmarkSpec {
            clues: vec![vec![]],
            ..spec
        };
        assert!(gen_benchmark(&empty).is_err());
        assert!(random_clue_spec(3, 1, 4, 0).is_err());
    }

    #[test]
    fn planted_frames_win_external_scoring() {
        let config = ToyModelConfig {
            input_dim: 32,
            external_dim: 32,
            ..small_config()
        };
        let model = ToyModel::new(config).unwrap();
        let spec = BenchmarkSpec {
            frames: 100,
            clues: random_clue_spec(100, 8, 3, 11).unwrap(),
            margin: SEPARABLE_MARGIN,
            redundancy: 0.9,
            input_dim: 32,
            seed: 11,
        };
        let bench = gen_benchmark(&spec).unwrap();
        let frames: Vec<Vec<f32>> = bench
            .features
            .iter()
            .map(|f| model.external_encode(f).unwrap())
            .collect();
        for q in &bench.questions {
            let qe = model.external_encode(&q.concept).unwrap();
            let scores: Vec<f64> = frames.iter().map(|f| cosine_sim(&qe, f).unwrap()).collect();
            let best = top_k_desc(&scores, 1)[0];
            assert!(q.clue.frames.contains(&best), "{}: argmax {best}", q.id);
        }
    }
}
