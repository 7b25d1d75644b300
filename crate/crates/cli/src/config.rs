use std::path::{Path, PathBuf};

use crnet::embedding::{EmbeddingConfig, PretrainConfig};
use crnet::episodic::{EpisodeConfig, MetricHead, ModelConfig, SyntheticConfig, TrainConfig};
use crnet::metric::LossWeights;
use crnet::numerics::OptimizerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory; `<out_dir>/dataset` when unset.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Validation interval in episodes; the best checkpoint is kept.
    pub eval_every: usize,
    pub val_tasks: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            eval_every: 250,
            val_tasks: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub num_tasks: usize,
    pub metric: MetricHead,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            num_tasks: 600,
            metric: MetricHead::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub meta_shift_tests: usize,
    pub meta_shift_shots: usize,
    pub fid_tests: usize,
    pub export_samples_per_class: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            meta_shift_tests: 500,
            meta_shift_shots: 5,
            fid_tests: 500,
            export_samples_per_class: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub bases: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            bases: vec![4, 8, 16],
        }
    }
}

/// Everything a command needs, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub episode: EpisodeConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainSchedule,
    pub eval: EvalSettings,
    pub analysis: AnalysisSettings,
    pub sweep: SweepSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        RunConfig {
            seed: 0,
            model: ModelConfig {
                embedding: EmbeddingConfig {
                    height: data.image_size,
                    width: data.image_size,
                    widths: vec![16, 16, 32, 32],
                    ..EmbeddingConfig::default()
                },
                ..ModelConfig::default()
            },
            data,
            weights: LossWeights::conv4(),
            episode: EpisodeConfig {
                episodes: 2000,
                ..EpisodeConfig::default()
            },
            optimizer: OptimizerConfig::adam(1e-3),
            pretrain: PretrainConfig::default(),
            train: TrainSchedule::default(),
            eval: EvalSettings::default(),
            analysis: AnalysisSettings::default(),
            sweep: SweepSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` layered over the defaults: tables merge key by key, so a
    /// partial `[model.embedding]` keeps the run-level defaults of its siblings.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let err = |e: &dyn std::fmt::Display| CliError::Usage(format!("config: {e}"));
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut base, user);
        base.try_into().map_err(|e| err(&e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("dataset"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episode: EpisodeConfig {
                seed: self.seed,
                ..self.episode.clone()
            },
            optimizer: self.optimizer,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: crnet::Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!(
                "seed {} does not fit the config file's integer range",
                self.seed
            )));
        }
        let e = &self.model.embedding;
        if e.height != self.data.image_size || e.width != self.data.image_size {
            return Err(CliError::Usage(format!(
                "embedding input {}x{} does not match data.image_size {}",
                e.height, e.width, self.data.image_size
            )));
        }
        if self.train.eval_every == 0 || self.train.val_tasks == 0 {
            return Err(CliError::Usage(
                "train.eval_every and train.val_tasks must be >= 1".into(),
            ));
        }
        if self.analysis.meta_shift_tests < 2 || self.analysis.meta_shift_shots == 0 {
            return Err(CliError::Usage(
                "analysis.meta_shift_tests must be >= 2 and meta_shift_shots >= 1".into(),
            ));
        }
        if self.sweep.bases.contains(&0) {
            return Err(CliError::Usage("sweep.bases entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tables with a `kind` tag select an enum variant and replace the default.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
