//! TOML run configurations. Every command reads an optional file and then
//! applies its command-line overrides.

use std::path::Path;

use anyhow::Context;
use posefree::calib::RansacParams;
use posefree::model::{ModelConfig, TrainConfig};
use posefree::synth::SynthConfig;
use posefree::Mode;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    pub scenes: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            scenes: 8,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructRun {
    pub mode: Mode,
    pub tau: f64,
    pub ransac: RansacParams,
}

impl Default for ReconstructRun {
    fn default() -> Self {
        ReconstructRun {
            mode: Mode::Object,
            tau: posefree::calib::DEFAULT_TAU,
            ransac: RansacParams::default(),
        }
    }
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| crate::UsageError(format!("{}: {e}", path.display())).into())
}

pub fn to_toml<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(toml::to_string(value)?)
}
