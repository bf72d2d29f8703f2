use std::path::Path;

use eeg_dcvit::model::ModelConfig;
use eeg_dcvit::preprocess::{SynthConfig, DEFAULT_CLUSTERS};
use eeg_dcvit::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    pub k: usize,
    pub snap_grid: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_CLUSTERS,
            snap_grid: false,
        }
    }
}

/// Everything a run depends on. Serialized verbatim into run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cluster: ClusterSection,
    /// Train / validation / test participant fractions.
    pub split: Split,
    pub clustered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Split(pub [f64; 3]);

impl Default for Split {
    fn default() -> Self {
        Split([0.7, 0.15, 0.15])
    }
}

/// Reads a config file. A run manifest is accepted too: its `config`
/// object is used.
pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
