//! The run configuration document (TOML). Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{TiedLoraConfig, TiedLoraMode};
use crate::error::{LabError, Result};
use crate::nanoformer::{TransformerConfig, DEFAULT_MAX_NEW_TOKENS};
use crate::taskgen::{Metric, SeqTaskSpec, TaskKind, VOCAB_SIZE};
use crate::trainkit::TrainConfig;

/// Adapter settings; the geometry comes from the `[model]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub mode: TiedLoraMode,
    pub rank: usize,
    /// Defaults to `rank`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub init_seed: u64,
    /// Defaults to `1/sqrt(d)`.
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default)]
    pub zero_start_override: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            mode: TiedLoraMode::Tabuv,
            rank: 8,
            alpha: None,
            init_seed: 0,
            init_std: None,
            zero_start_override: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Seed for the random initial weights.
    pub init_seed: u64,
    /// Task mixture the base is trained on.
    pub tasks: Vec<SeqTaskSpec>,
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            init_seed: 0,
            tasks: vec![
                // copy over the first 9 letters only; the adaptation task adds the rest
                SeqTaskSpec {
                    letters: 9,
                    ..SeqTaskSpec::new(TaskKind::Copy, 101, (3000, 100, 100), 8)
                },
                SeqTaskSpec::new(TaskKind::Reverse, 102, (3000, 100, 100), 8),
                SeqTaskSpec::new(TaskKind::Modadd, 103, (3000, 100, 100), 2),
            ],
            train: TrainConfig {
                max_steps: 3000,
                base_lr: 1e-3,
                batch_size: 32,
                val_interval: 100,
                patience: 5,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: Metric,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metric: Metric::ExactMatch,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub modes: Vec<TiedLoraMode>,
    pub ranks: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 picks the number of CPUs.
    pub threads: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            modes: TiedLoraMode::ALL.to_vec(),
            ranks: vec![2, 8, 32, 128],
            lrs: vec![1e-4, 1e-5],
            seeds: vec![0],
            threads: 0,
        }
    }
}

/// One document describing a base model, an adapter, training, the task and a sweep grid.
///
/// Missing sections take the values of [`RunConfig::default`], the desk-scale
/// copy experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub adapter: AdapterSection,
    pub train: TrainConfig,
    pub task: SeqTaskSpec,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub out_dir: PathBuf,
}

fn default_task() -> SeqTaskSpec {
    SeqTaskSpec::new(TaskKind::Copy, 11, (2000, 100, 200), 8)
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: TransformerConfig {
                max_seq_len: 24,
                ..TransformerConfig::default()
            },
            adapter: AdapterSection::default(),
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            task: default_task(),
            pretrain: PretrainSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Cross-section checks on top of each section's own validation.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        self.adapter_config()?;
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(LabError::Config(format!(
                "model vocabulary ({}) is smaller than the task vocabulary ({VOCAB_SIZE})",
                self.model.vocab_size
            )));
        }
        for task in std::iter::once(&self.task).chain(&self.pretrain.tasks) {
            if task.max_sequence_len() > self.model.max_seq_len {
                return Err(LabError::Config(format!(
                    "{} task sequences reach {} tokens but max_seq_len is {}",
                    task.kind,
                    task.max_sequence_len(),
                    self.model.max_seq_len
                )));
            }
        }
        if self.sweep.ranks.contains(&0) || self.sweep.lrs.iter().any(|&lr| !(lr > 0.0)) {
            return Err(LabError::Config("sweep ranks and learning rates must be positive".into()));
        }
        Ok(())
    }

    /// The adapter configuration implied by `[adapter]` and `[model]`.
    pub fn adapter_config(&self) -> Result<TiedLoraConfig> {
        let mut cfg = self.adapter_config_for(self.adapter.mode, self.adapter.rank, self.adapter.init_seed)?;
        cfg.zero_start_override = self.adapter.zero_start_override;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Adapter configuration for another mode/rank/seed (as in a sweep cell).
    /// `zero_start_override` carries over only to the modes it applies to.
    pub fn adapter_config_for(&self, mode: TiedLoraMode, rank: usize, seed: u64) -> Result<TiedLoraConfig> {
        let mut cfg = TiedLoraConfig::new(mode, rank, self.model.dims(), seed)?;
        if let Some(alpha) = self.adapter.alpha {
            cfg.alpha = alpha;
        }
        if let Some(std) = self.adapter.init_std {
            cfg.init_std = std;
        }
        cfg.zero_start_override =
            self.adapter.zero_start_override && matches!(mode, TiedLoraMode::Tb | TiedLoraMode::Tbu);
        cfg.validate()?;
        Ok(cfg)
    }
}
