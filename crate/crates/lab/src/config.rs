// SPDX-License-Identifier: MIT OR Apache-2.0

//! The TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use romelab_core::editor::{EditConfig, EditMode, ValueSearchConfig, DEFAULT_DENOM_FLOOR};
use romelab_core::eval::PrefixMode;
use romelab_core::keyspace::{PrefixSource, Ridge};
use romelab_core::model::{BosMode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Formats {
    Json,
    Csv,
    #[default]
    Both,
}

impl Formats {
    pub fn json(self) -> bool {
        matches!(self, Formats::Json | Formats::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Formats::Csv | Formats::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Defaults to `4 · d_model`.
    pub d_mlp: Option<usize>,
    pub max_seq: usize,
    pub edited_layer: usize,
    #[serde(default = "default_bos")]
    pub bos_mode: BosMode,
    /// Weight file written by `train` and read by everything else.
    pub weights: Option<PathBuf>,
}

fn default_bos() -> BosMode {
    BosMode::None
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::byte_level(self.n_layers, self.d_model, self.n_heads, self.max_seq, self.edited_layer);
        if let Some(m) = self.d_mlp {
            c.d_mlp = m;
        }
        if self.bos_mode == BosMode::Prepend {
            c = c.with_bos();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    /// Leading bytes kept out of training and covariance estimation and
    /// used as the perplexity probe.
    #[serde(default = "default_held_out")]
    pub held_out_bytes: usize,
}

fn default_held_out() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 1500,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            warmup_steps: t.warmup_steps,
            min_lr_ratio: t.min_lr_ratio,
            grad_clip: t.grad_clip,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed,
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    /// Second-moment file written by `estimate-cov`.
    pub path: Option<PathBuf>,
    pub ridge: Ridge,
    pub max_samples: usize,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        Self { path: None, ridge: Ridge::default(), max_samples: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixSection {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub source: PrefixSource,
}

impl Default for PrefixSection {
    fn default() -> Self {
        Self { count: 10, min_len: 2, max_len: 10, source: PrefixSource::ModelGenerated }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub suite: PathBuf,
    pub mode: EditMode,
    pub prefix_test: PrefixMode,
    pub denom_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation, batch sampling, prefix sampling and
    /// test-prefix draws.
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub formats: Formats,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub covariance: CovarianceSection,
    #[serde(default)]
    pub prefixes: PrefixSection,
    pub edit: EditSection,
    #[serde(default)]
    pub value_search: ValueSearchConfig,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Reads, resolves relative paths against the file's directory, fills
    /// defaulted output paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        self.out_dir = absolute(base, &self.out_dir);
        self.corpus.path = absolute(base, &self.corpus.path);
        self.edit.suite = absolute(base, &self.edit.suite);
        self.model.weights = Some(match &self.model.weights {
            Some(p) => absolute(base, p),
            None => self.out_dir.join("model.rlw"),
        });
        self.covariance.path = Some(match &self.covariance.path {
            Some(p) => absolute(base, p),
            None => self.out_dir.join("second_moment.rlw"),
        });
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.value_search.validate()?;
        for p in [&self.corpus.path, &self.edit.suite] {
            if !p.is_file() {
                return Err(LabError::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if self.prefixes.count == 0 || self.prefixes.min_len == 0 || self.prefixes.max_len < self.prefixes.min_len {
            return Err(LabError::Config("prefixes need count ≥ 1 and 1 ≤ min_len ≤ max_len".into()));
        }
        if self.prefixes.source == PrefixSource::UserSupplied {
            return Err(LabError::Config("prefixes.source must be model_generated or random_bytes".into()));
        }
        if !(self.edit.denom_floor >= 0.0) {
            return Err(LabError::Config("edit.denom_floor must be non-negative".into()));
        }
        if self.train.steps > 0 && self.train.seq_len > self.model_config().max_input_len() {
            return Err(LabError::Config("train.seq_len exceeds the model's input length".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config()
    }

    pub fn weights_path(&self) -> &Path {
        self.model.weights.as_deref().expect("resolved")
    }

    pub fn covariance_path(&self) -> &Path {
        self.covariance.path.as_deref().expect("resolved")
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig { value_search: self.value_search.clone(), denom_floor: self.edit.denom_floor }
    }

    /// A small, complete configuration for the generated fact world.
    pub fn example(corpus: &str, suite: &str, out_dir: &str) -> Self {
        Self {
            seed: 0,
            out_dir: out_dir.into(),
            formats: Formats::Both,
            model: ModelSection {
                n_layers: 4,
                d_model: 64,
                n_heads: 4,
                d_mlp: None,
                max_seq: 64,
                edited_layer: 0,
                bos_mode: BosMode::None,
                weights: None,
            },
            corpus: CorpusSection { path: corpus.into(), held_out_bytes: 4096 },
            train: TrainSection { seq_len: 64, warmup_steps: 50, ..TrainSection::default() },
            covariance: CovarianceSection::default(),
            prefixes: PrefixSection::default(),
            edit: EditSection {
                suite: suite.into(),
                mode: EditMode::CRome,
                prefix_test: PrefixMode::None,
                denom_floor: DEFAULT_DENOM_FLOOR,
            },
            value_search: ValueSearchConfig::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }
}
