//! Run configuration: strategy, window and retrieval budgets, fusion, spill.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use memstream_core::encoder::CompressionStrategy;
use memstream_core::kv_store::{SpillPolicy, WindowCapacity};
use memstream_core::retrieval::{Fusion, RetrievalConfig, RetrievalMode, DEFAULT_BUDGET, DEFAULT_RRF_K};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SPILL_DIR_ENV: &str = "MEMSTREAM_SPILL_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpillConfig {
    /// Per-layer bytes of offloaded frames kept in memory before spilling.
    pub threshold_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: CompressionStrategy,
    pub window: WindowCapacity,
    pub budget: usize,
    pub mode: RetrievalMode,
    pub fusion: Fusion,
    pub rrf_k: f64,
    pub internal_weight: f64,
    pub external_weight: f64,
    pub seed: u64,
    /// Layers whose self-similarity matrices go into the report; empty
    /// means first, middle and last.
    pub similarity_layers: Vec<usize>,
    pub entropy_bins: usize,
    pub spill: Option<SpillConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: CompressionStrategy::Aks {
                keep: Default::default(),
            },
            window: WindowCapacity::default(),
            budget: DEFAULT_BUDGET,
            mode: RetrievalMode::default(),
            fusion: Fusion::default(),
            rrf_k: DEFAULT_RRF_K,
            internal_weight: 1.0,
            external_weight: 1.0,
            seed: 0,
            similarity_layers: Vec::new(),
            entropy_bins: 20,
            spill: None,
        }
    }
}

/// Command-line overrides, applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<CompressionStrategy>,
    pub mode: Option<RetrievalMode>,
    pub fusion: Option<Fusion>,
    pub rrf_k: Option<f64>,
    pub budget: Option<usize>,
    pub window_tokens: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(f) = o.fusion {
            self.fusion = f;
        }
        if let Some(k) = o.rrf_k {
            self.rrf_k = k;
        }
        if let Some(b) = o.budget {
            self.budget = b;
        }
        if let Some(w) = o.window_tokens {
            self.window = WindowCapacity::Tokens(w);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.strategy.validate()?;
        let window = match self.window {
            WindowCapacity::Tokens(n) | WindowCapacity::Frames(n) => n,
        };
        if window == 0 {
            bail!("window budget must be >= 1");
        }
        if self.budget == 0 {
            bail!("retrieval budget must be >= 1");
        }
        if !(self.rrf_k.is_finite() && self.rrf_k >= 0.0) {
            bail!("rrf_k must be finite and >= 0");
        }
        for w in [self.internal_weight, self.external_weight] {
            if !(w.is_finite() && w > 0.0) {
                bail!("fusion weights must be finite and > 0");
            }
        }
        if self.entropy_bins == 0 {
            bail!("entropy_bins must be >= 1");
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            mode: self.mode,
            fusion: self.fusion,
            budget: self.budget,
            rrf_k: self.rrf_k,
            internal_weight: self.internal_weight,
            external_weight: self.external_weight,
        }
    }

    /// Spill policy with the environment override applied. Without a
    /// configured threshold nothing spills, whatever the environment says.
    pub fn spill_policy(&self, default_dir: &Path) -> Option<SpillPolicy> {
        let spill = self.spill.as_ref()?;
        let dir = std::env::var_os(SPILL_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| spill.dir.clone())
            .unwrap_or_else(|| default_dir.to_path_buf());
        Some(SpillPolicy {
            dir,
            threshold_bytes: spill.threshold_bytes,
        })
    }

    /// Short digest of everything that can change a report. Spill settings
    /// only move bytes between memory and disk, so they are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.spill = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..6])
    }
}
