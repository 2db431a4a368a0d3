//! Stream manifests: a JSON description of a feature stream, its questions,
//! external embeddings and clue annotations. Tensor paths are relative to
//! the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use memstream_core::analysis::{ClueAnnotation, DEFAULT_TEMPORAL_PATCH};
use memstream_core::encoder::{EncodeError, FrameInput, LayerQkv};
use memstream_core::kv_store::Grid;
use memstream_core::numerics::Matrix;
use memstream_core::retrieval::{ExternalEmbeddings, QuestionFeatures};
use memstream_core::toy_model::{ToyModel, ToyModelConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_dims, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("{path}: expected dims {expected:?}, found {got:?}")]
    Shape {
        path: PathBuf,
        expected: Vec<u64>,
        got: Vec<u64>,
    },
    #[error(transparent)]
    Model(#[from] memstream_core::toy_model::ToyModelError),
    #[error(transparent)]
    Analysis(#[from] memstream_core::analysis::AnalysisError),
    #[error(transparent)]
    Retrieval(#[from] memstream_core::retrieval::RetrievalError),
}

pub type Result<T> = std::result::Result<T, ManifestError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ManifestError::Invalid(msg.into()))
}

fn default_patch() -> usize {
    DEFAULT_TEMPORAL_PATCH
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QkvPaths {
    pub queries: PathBuf,
    pub keys: PathBuf,
    pub values: PathBuf,
}

/// One frame feature: either a toy-model input vector or precomputed
/// per-layer Q/K/V tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    /// `[height, width]` of the token grid.
    pub grid: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qkv: Option<Vec<QkvPaths>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionEntry {
    pub id: String,
    /// Toy-model concept vector, projected into per-layer question features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<QkvPaths>>,
    /// Raw video frame indices; divided by the temporal patch.
    pub clue_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEntry {
    #[serde(default = "default_external_name")]
    pub name: String,
    /// `T × E`.
    pub frame_embeddings: PathBuf,
    /// `Q × E`, rows in question order.
    pub question_embeddings: PathBuf,
}

fn default_external_name() -> String {
    "external".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub video_id: String,
    #[serde(default = "default_patch")]
    pub temporal_patch: usize,
    /// Needed when any frame or question refers to toy-model inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ToyModelConfig>,
    /// Needed when there is no model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub questions: Vec<QuestionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalEntry>,
}

/// A manifest whose referenced files have all been shape-checked.
#[derive(Debug)]
pub struct ValidatedManifest {
    pub manifest: StreamManifest,
    pub base: PathBuf,
    pub dims: ModelDims,
    model: Option<ToyModel>,
    clues: Vec<ClueAnnotation>,
}

impl StreamManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl ValidatedManifest {
    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: StreamManifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::validate(manifest, base)
    }

    /// Checks every shape before anything is computed.
    pub fn validate(manifest: StreamManifest, base: PathBuf) -> Result<Self> {
        if manifest.temporal_patch == 0 {
            return invalid("temporal_patch must be >= 1");
        }
        let model = match &manifest.model {
            Some(cfg) => Some(ToyModel::new(cfg.clone())?),
            None => None,
        };
        let dims = match (&manifest.model, manifest.dims) {
            (Some(m), d) => {
                let from_model = ModelDims {
                    layers: m.layers,
                    heads: m.heads,
                    head_dim: m.head_dim,
                };
                if d.is_some_and(|d| d != from_model) {
                    return invalid("dims disagree with model");
                }
                from_model
            }
            (None, Some(d)) => d,
            (None, None) => return invalid("manifest needs either model or dims"),
        };
        if dims.layers == 0 || dims.heads == 0 || dims.head_dim == 0 {
            return invalid("layers, heads and head_dim must be >= 1");
        }
        let width = (dims.heads * dims.head_dim) as u64;
        let v = Self {
            base,
            dims,
            model,
            clues: Vec::new(),
            manifest,
        };

        for (pos, f) in v.manifest.frames.iter().enumerate() {
            if f.index != pos {
                return invalid(format!("frame at position {pos} has index {}", f.index));
            }
            if f.grid[0] == 0 || f.grid[1] == 0 {
                return invalid(format!("frame {pos}: empty grid"));
            }
            let tokens = (f.grid[0] * f.grid[1]) as u64;
            match (&f.input, &f.qkv) {
                (Some(input), None) => {
                    let model = v.require_model(|| format!("frame {pos} input"))?;
                    v.check(input, &[model.config().input_dim as u64])?;
                }
                (None, Some(layers)) => v.check_qkv(layers, Some(tokens), width, &format!("frame {pos}"))?,
                _ => return invalid(format!("frame {pos}: give exactly one of input or qkv")),
            }
        }

        let frames = v.manifest.frames.len();
        let mut ids = BTreeSet::new();
        let mut clues = Vec::with_capacity(v.manifest.questions.len());
        for q in &v.manifest.questions {
            if !ids.insert(q.id.as_str()) {
                return invalid(format!("duplicate question id {}", q.id));
            }
            match (&q.concept, &q.features) {
                (Some(c), None) => {
                    let model = v.require_model(|| format!("question {} concept", q.id))?;
                    v.check(c, &[model.config().input_dim as u64])?;
                }
                (None, Some(layers)) => v.check_qkv(layers, None, width, &format!("question {}", q.id))?,
                _ => return invalid(format!("question {}: give exactly one of concept or features", q.id)),
            }
            clues.push(ClueAnnotation::from_raw_frames(
                q.id.clone(),
                &q.clue_frames,
                v.manifest.temporal_patch,
                frames,
            )?);
        }

        if let Some(ext) = &v.manifest.external {
            let fd = v.dims_of(&ext.frame_embeddings)?;
            if fd.len() != 2 || fd[0] != frames as u64 || fd[1] == 0 {
                return Err(ManifestError::Shape {
                    path: v.base.join(&ext.frame_embeddings),
                    expected: vec![frames as u64, fd.get(1).copied().unwrap_or(0).max(1)],
                    got: fd,
                });
            }
            v.check(&ext.question_embeddings, &[v.manifest.questions.len() as u64, fd[1]])?;
        }
        Ok(Self { clues, ..v })
    }

    fn require_model(&self, what: impl FnOnce() -> String) -> Result<&ToyModel> {
        match &self.model {
            Some(m) => Ok(m),
            None => invalid(format!("{} needs a model section", what())),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn dims_of(&self, p: &Path) -> Result<Vec<u64>> {
        let path = self.resolve(p);
        read_dims(&path).map_err(|source| ManifestError::Tensor { path, source })
    }

    fn check(&self, p: &Path, expected: &[u64]) -> Result<()> {
        let got = self.dims_of(p)?;
        if got != expected {
            return Err(ManifestError::Shape {
                path: self.resolve(p),
                expected: expected.to_vec(),
                got,
            });
        }
        Ok(())
    }

    fn check_qkv(&self, layers: &[QkvPaths], tokens: Option<u64>, width: u64, what: &str) -> Result<()> {
        if layers.len() != self.dims.layers {
            return invalid(format!(
                "{what}: {} layers listed, expected {}",
                layers.len(),
                self.dims.layers
            ));
        }
        for l in layers {
            let n = match tokens {
                Some(n) => n,
                None => {
                    let d = self.dims_of(&l.queries)?;
                    match d.as_slice() {
                        [n, _] if *n > 0 => *n,
                        _ => return invalid(format!("{what}: queries must be a non-empty n × {width} matrix")),
                    }
                }
            };
            for p in [&l.queries, &l.keys, &l.values] {
                self.check(p, &[n, width])?;
            }
        }
        Ok(())
    }

    fn read(&self, p: &Path) -> Result<Tensor> {
        let path = self.resolve(p);
        Tensor::read(&path).map_err(|source| ManifestError::Tensor { path, source })
    }

    fn read_matrix(&self, p: &Path) -> Result<Matrix> {
        let path = self.resolve(p);
        self.read(p)?
            .into_matrix()
            .map_err(|source| ManifestError::Tensor { path, source })
    }

    fn read_vector(&self, p: &Path) -> Result<Vec<f32>> {
        let path = self.resolve(p);
        self.read(p)?
            .into_vector()
            .map_err(|source| ManifestError::Tensor { path, source })
    }

    fn read_qkv(&self, layers: &[QkvPaths]) -> Result<Vec<LayerQkv>> {
        layers
            .iter()
            .map(|l| {
                Ok(LayerQkv {
                    queries: self.read_matrix(&l.queries)?,
                    keys: self.read_matrix(&l.keys)?,
                    values: self.read_matrix(&l.values)?,
                })
            })
            .collect()
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn clues(&self) -> &[ClueAnnotation] {
        &self.clues
    }

    pub fn frame(&self, t: usize) -> Result<FrameInput> {
        let f = &self.manifest.frames[t];
        let grid = Grid::new(f.grid[0], f.grid[1]);
        match (&f.input, &f.qkv) {
            (Some(input), _) => {
                let model = self.require_model(|| format!("frame {t} input"))?;
                Ok(model.frame_input(t, &self.read_vector(input)?, grid)?)
            }
            (None, Some(layers)) => Ok(FrameInput {
                frame_index: t,
                grid,
                layers: self.read_qkv(layers)?,
            }),
            (None, None) => invalid(format!("frame {t} has no source")),
        }
    }

    /// Frames loaded lazily, one at a time.
    pub fn frames(&self) -> impl Iterator<Item = std::result::Result<FrameInput, EncodeError>> + '_ {
        (0..self.frame_count()).map(|t| self.frame(t).map_err(|e| EncodeError::Input(e.to_string())))
    }

    pub fn question(&self, id: &str) -> Result<QuestionFeatures> {
        let Some(q) = self.manifest.questions.iter().find(|q| q.id == id) else {
            return invalid(format!("unknown question {id}"));
        };
        let layers = match (&q.concept, &q.features) {
            (Some(c), _) => {
                let model = self.require_model(|| format!("question {id} concept"))?;
                model.project_question(&self.read_vector(c)?)?
            }
            (None, Some(layers)) => self.read_qkv(layers)?,
            (None, None) => return invalid(format!("question {id} has no features")),
        };
        Ok(QuestionFeatures {
            id: id.to_string(),
            layers,
        })
    }

    pub fn external(&self) -> Result<Option<ExternalEmbeddings>> {
        let Some(ext) = &self.manifest.external else {
            return Ok(None);
        };
        let frames = self.read_matrix(&ext.frame_embeddings)?;
        let qs = self.read_matrix(&ext.question_embeddings)?;
        let questions: BTreeMap<String, Vec<f32>> = self
            .manifest
            .questions
            .iter()
            .zip(qs.row_iter())
            .map(|(q, row)| (q.id.clone(), row.to_vec()))
            .collect();
        Ok(Some(ExternalEmbeddings::new(ext.name.clone(), frames, questions)?))
    }
}
