//! Optional TOML configuration. Every key mirrors a command-line flag; flags
//! given explicitly take precedence.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ids: Option<PathBuf>,
    pub variants: Option<Vec<String>>,
    pub size: Option<usize>,
    pub folds: Option<usize>,
    pub fold_seed: Option<u64>,
    pub filters: Option<Vec<usize>>,
    pub attention_channels: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub loss_smoothing: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub threshold: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub a3: Option<f64>,
    pub a4: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub count: Option<usize>,
    pub size: Option<usize>,
    pub quality_mix: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }

    pub fn load_opt(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
    }
}

/// First present value of flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> CliResult<T> {
    flag.or(file)
        .ok_or_else(|| CliError::validation(format!("--{name} is required (flag or config key)")))
}
