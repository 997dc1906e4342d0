use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::{LoraTargets, ModelConfig};
use crate::probe::DEFAULT_MASK_FRACTION;
use crate::train::{PretrainSettings, SgdSettings, TrainMode};

/// What the fine-tuned model is trained to do.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Multi-label classification of patients.
    #[default]
    Classify,
    /// Filling the masked tail of individual report findings.
    Complete,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Objective::Classify),
            "complete" => Ok(Objective::Complete),
            other => Err(Error::config(format!(
                "unknown objective {other:?}; expected classify or complete"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    #[serde(flatten)]
    pub generator: GeneratorConfig,
    /// Train, validation and test fractions.
    pub ratios: Vec<f64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            generator: GeneratorConfig::default(),
            ratios: vec![0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub scale: f64,
    pub targets: LoraTargets,
    pub train_head: bool,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection {
            scale: 1.0,
            targets: LoraTargets::Attention,
            train_head: true,
        }
    }
}

/// Backbone pretraining on a separately generated public corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub public_patients: usize,
    pub public_seed: u64,
    pub init_seed: u64,
    #[serde(flatten)]
    pub settings: PretrainSettings,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            public_patients: 2000,
            public_seed: 1_000_003,
            init_seed: 0,
            settings: PretrainSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub splits: PathBuf,
    pub vocab: PathBuf,
    pub backbone: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "data/corpus.jsonl".into(),
            splits: "data/splits.tsv".into(),
            vocab: "data/vocab.txt".into(),
            backbone: "data/backbone.json".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Everything a command needs. Loaded from TOML, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub objective: Objective,
    pub seeds: Vec<u64>,
    /// Used only by `dp-lora`.
    pub epsilons: Vec<f64>,
    /// LoRA ranks; must stay unset for `full-ft`.
    pub ranks: Option<Vec<usize>>,
    pub threshold: f64,
    pub mask_fraction: f64,
    /// `vocab_size` is the vocabulary cap; `n_labels` follows the schema.
    pub model: ModelConfig,
    pub lora: LoraSection,
    pub sgd: SgdSettings,
    pub pretrain: PretrainSection,
    pub corpus: CorpusSection,
    pub paths: Paths,
}

pub const DEFAULT_RANKS: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_EPSILONS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TrainMode::DpLora,
            objective: Objective::Classify,
            seeds: vec![0],
            epsilons: DEFAULT_EPSILONS.to_vec(),
            ranks: None,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            mask_fraction: DEFAULT_MASK_FRACTION,
            model: ModelConfig::default(),
            lora: LoraSection::default(),
            sgd: SgdSettings::default(),
            pretrain: PretrainSection::default(),
            corpus: CorpusSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Ranks in effect: the configured list, or the default grid for the
    /// LoRA modes.
    pub fn rank_list(&self) -> Vec<usize> {
        self.ranks.clone().unwrap_or_else(|| DEFAULT_RANKS.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        match self.mode {
            TrainMode::FullFt if self.ranks.is_some() => {
                return Err(Error::config("full-ft takes no LoRA ranks"));
            }
            TrainMode::DpLora => {
                if self.epsilons.is_empty() {
                    return Err(Error::config("dp-lora needs at least one epsilon"));
                }
                if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
                    return Err(Error::config(format!("epsilon {e} must be positive and finite")));
                }
            }
            _ => {}
        }
        if self.mode != TrainMode::FullFt {
            let ranks = self.rank_list();
            if ranks.is_empty() || ranks.contains(&0) {
                return Err(Error::config("LoRA ranks must be a non-empty list of positive integers"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0,1]", self.threshold)));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::config(format!(
                "mask fraction {} outside (0,1)",
                self.mask_fraction
            )));
        }
        if self.sgd.batch_size == 0 || !(self.sgd.learning_rate > 0.0) {
            return Err(Error::config("batch size and learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(Error::config(format!("momentum {} outside [0,1)", self.sgd.momentum)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of everything except paths.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
