//! Experiment configuration (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use abft_core::abft::AbftConfig;
use abft_core::analysis::GridSpec;
use abft_core::data::corpus::{CorpusConfig, World, WorldConfig};
use abft_core::data::SplitSizes;
use abft_core::model::ModelConfig;
use abft_core::rng;
use abft_core::train::{E2eConfig, PretrainSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// When false the `wall_ms` column is written as 0 so that run logs are
    /// byte-reproducible.
    pub record_wall_time: bool,
    pub model: ModelSection,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainSection,
    pub task: TaskSection,
    pub method: Method,
    pub abft: AbftConfig,
    pub e2e: E2eConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            record_wall_time: true,
            model: ModelSection::default(),
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainSection::default(),
            task: TaskSection::default(),
            method: Method::Abft,
            abft: AbftConfig {
                lr: 1e-3,
                ..AbftConfig::default()
            },
            e2e: E2eConfig {
                lr: 1e-3,
                ..E2eConfig::default()
            },
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            max_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Held-out corpus sequences for the plateau check.
    pub heldout: usize,
    /// Repeated-segment probes for the induction signature.
    pub probes: usize,
    pub schedule: PretrainSchedule,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            heldout: 256,
            probes: 128,
            schedule: PretrainSchedule::default(),
        }
    }
}

/// Another synthetic task on the same vocabulary, for out-of-domain checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodTask {
    pub name: String,
    pub groups: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub groups: Vec<usize>,
    pub labels: Vec<usize>,
    pub input_len: usize,
    pub k: usize,
    /// Training prompts (`n_d`).
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out prompts for the validation ABFT loss.
    pub n_val: usize,
    pub split: SplitSizes,
    pub ood: Vec<OodTask>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            groups: vec![0, 1, 2, 3],
            labels: vec![0, 1, 2, 3],
            input_len: 2,
            k: 4,
            n_train: 512,
            n_test: 1024,
            n_val: 128,
            split: SplitSizes {
                train: 96,
                demo: 48,
                query: 64,
            },
            ood: vec![
                OodTask {
                    name: "ood_a".into(),
                    groups: vec![4, 5, 6, 7],
                    labels: vec![4, 5, 6, 7],
                },
                OodTask {
                    name: "ood_b".into(),
                    groups: vec![8, 9, 10],
                    labels: vec![8, 9, 10],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Abft,
    E2e,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Abft => "abft",
            Method::E2e => "e2e",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Acc,
    Heads,
    Profile,
    Grid,
    Consistency,
    Unseen,
    Shift,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::Acc => "acc",
            Analysis::Heads => "heads",
            Analysis::Profile => "profile",
            Analysis::Grid => "grid",
            Analysis::Consistency => "consistency",
            Analysis::Unseen => "unseen",
            Analysis::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub analyses: Vec<Analysis>,
    pub grid: GridSpec,
    pub consistency_queries: usize,
    pub resamplings: usize,
    pub unseen_n: usize,
    /// Prompts rendered as attention heatmaps by the profile analysis.
    pub heatmaps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            analyses: vec![Analysis::Acc],
            grid: GridSpec::default(),
            consistency_queries: 256,
            resamplings: 3,
            unseen_n: 512,
            heatmaps: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Hex SHA-256 of the canonical TOML form, with the output directory
    /// left out so that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let canonical = Self { out: None, ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.seed > i64::MAX as u64 {
            return Err(LabError::config("seed", "must fit in a signed 64-bit integer"));
        }
        self.model_config().validate()?;
        self.world()?;
        self.abft.validate()?;
        let t = &self.task;
        if t.groups.len() != t.labels.len() || t.groups.len() < 2 {
            return Err(LabError::config("task.groups", "need one label per group and at least two classes"));
        }
        if t.k == 0 {
            return Err(LabError::config("task.k", "must be positive"));
        }
        if t.n_train == 0 || t.n_test == 0 || t.n_val == 0 {
            return Err(LabError::config("task", "n_train, n_test and n_val must be positive"));
        }
        if self.pretrain.probes == 0 {
            return Err(LabError::config("pretrain.probes", "must be positive"));
        }
        if self.eval.resamplings == 0 || self.eval.consistency_queries == 0 {
            return Err(LabError::config("eval", "resamplings and consistency_queries must be positive"));
        }
        self.eval.grid.axis()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            vocab_size: self.world.vocab_size,
            max_seq_len: self.model.max_seq_len,
            // TOML integers are signed 64-bit
            seed: rng::derive_seed(self.seed, rng::INIT) >> 1,
        }
    }

    pub fn world(&self) -> Result<World, LabError> {
        Ok(World::new(self.world)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("seed = 3\n[model]\nn_layer = 2\n").unwrap_err();
        assert!(matches!(err, LabError::Config { .. }), "{err}");
        assert!(err.to_string().contains("n_layer"));
    }

    #[test]
    fn partial_tables_take_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[model]\nn_layers = 2\n[abft]\npid_enabled = false\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.d_model, 128);
        assert!(!cfg.abft.pid_enabled);
        assert_eq!(cfg.abft.n_b, 32);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n").unwrap_err();
        assert!(matches!(err, LabError::Config { ref field, .. } if field.contains("d_model")), "{err}");
    }
}
