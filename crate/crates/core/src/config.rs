//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusFormat;
use crate::error::{Error, Result};
use crate::model::InitConfig;
use crate::objective::ObjectiveConfig;

/// Topic sizes used when neither a tree nor explicit sizes are given.
pub const DEFAULT_LAYER_SIZES: [usize; 15] = [256, 224, 192, 160, 128, 112, 96, 80, 64, 56, 48, 40, 32, 16, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Unsupervised: no taxonomy prior.
    #[default]
    GaussSawetm,
    /// Taxonomy-guided: the prior is added with weight `beta`.
    Topicnet,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss-sawetm" => Ok(Mode::GaussSawetm),
            "topicnet" => Ok(Mode::Topicnet),
            _ => Err(Error::Config(format!("unknown mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
    pub vocab: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    /// Tree JSON written by `build-tree`.
    pub tree: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Mode,
    /// Topic counts `K_1..K_T`; taken from the tree when one is configured.
    pub layer_sizes: Option<Vec<usize>>,
    pub embedding_dim: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mode: Mode::GaussSawetm,
            layer_sizes: None,
            embedding_dim: 100,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub shuffle: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub eval_samples: usize,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 200,
            epochs: 10,
            max_steps: None,
            seed: 0,
            shuffle: true,
            train_fraction: 0.8,
            split_seed: 0,
            eval_samples: 8,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub taxonomy: Option<TaxonomySection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub training: TrainingSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.path);
        fix(&mut self.corpus.vocab);
        if let Some(t) = &mut self.taxonomy {
            fix(&mut t.tree);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.mode == Mode::Topicnet && self.taxonomy.is_none() {
            return Err(Error::Config("topicnet mode requires a [taxonomy] tree".into()));
        }
        if m.embedding_dim == 0 || m.hidden == 0 {
            return Err(Error::Config("embedding_dim and hidden must be >= 1".into()));
        }
        if let Some(sizes) = &m.layer_sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::Config("layer_sizes must be non-empty and positive".into()));
            }
        }
        let o = &self.objective;
        if !(o.margin >= 0.0 && o.beta >= 0.0 && o.gamma_threshold >= 0.0) {
            return Err(Error::Config("margin, beta and gamma_threshold must be >= 0".into()));
        }
        if o.train_samples == 0 || o.chunk_size == 0 {
            return Err(Error::Config("train_samples and chunk_size must be >= 1".into()));
        }
        let i = &self.init;
        if !(i.mean_std > 0.0 && i.variance > 0.0 && i.gamma_shape > 0.0 && i.scale_c > 0.0) {
            return Err(Error::Config("init constants must be positive".into()));
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if t.batch_size == 0 || t.eval_samples == 0 {
            return Err(Error::Config("batch_size and eval_samples must be >= 1".into()));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if t.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Topic sizes for a run without a tree.
    pub fn topic_sizes(&self) -> Vec<usize> {
        self.model.layer_sizes.clone().unwrap_or_else(|| DEFAULT_LAYER_SIZES.to_vec())
    }

    /// Hex SHA-256 of the canonical JSON form of the config. The training
    /// budget (`epochs`, `max_steps`) is left out: it decides where a run
    /// stops, not the path it takes, so a run may be resumed with a larger one.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.training.epochs = 0;
        canonical.training.max_steps = None;
        let json = serde_json::to_string(&canonical).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}
