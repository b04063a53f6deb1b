//! TOML run configurations. Every section is optional; command-line flags
//! override file values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use usda::model::ModelConfig;
use usda::pretrain::PretrainConfig;
use usda::{EncoderConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// A dialogue file, or a directory of `train/valid/test.jsonl`.
    pub path: Option<PathBuf>,
    pub ratios: [usize; 3],
    pub stratified: bool,
    /// Fixed split assignment; overrides the seeded split.
    pub split_file: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            ratios: [8, 1, 1],
            stratified: false,
            split_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub min_count: usize,
    pub max_size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            min_count: 1,
            max_size: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub seed: u64,
    pub data: DataSection,
    pub vocab: VocabSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainFile {
    pub seed: u64,
    /// Pre-training sample file.
    pub data: Option<PathBuf>,
    /// Held-out sample file for per-epoch evaluation.
    pub valid: Option<PathBuf>,
    pub vocab: VocabSection,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
}

pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
