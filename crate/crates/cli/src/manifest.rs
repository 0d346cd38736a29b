//! Run manifest: the settings of a training run and every artifact written
//! under its output directory. Timestamps live only here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use salseg_core::model::Variant;
use salseg_core::saliency::ConfidenceParams;
use salseg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RECORD_FILE: &str = "record.json";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_DIR: &str = "report";

/// Settings that determine the trained weights; a resumed run must match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub dataset_root: PathBuf,
    pub ids_file: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub folds: usize,
    pub fold_seed: u64,
    pub input_side: usize,
    pub encoder_filters: [usize; 5],
    pub attention_channels: usize,
    pub train: TrainConfig,
    pub filter: ConfidenceParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub settings: RunSettings,
    /// Completed folds per variant name.
    pub completed: BTreeMap<String, Vec<usize>>,
    /// Paths relative to `out_dir`.
    pub artifacts: Vec<PathBuf>,
    pub created_unix: u64,
    pub updated_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn fold_dir(out: &Path, variant: Variant, fold: usize) -> PathBuf {
    out.join(variant.name()).join(format!("fold{fold}"))
}

pub fn checkpoint_path(out: &Path, variant: Variant, fold: usize) -> PathBuf {
    fold_dir(out, variant, fold).join(CHECKPOINT_FILE)
}

pub fn relative(out: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(out).map_or_else(|_| path.to_path_buf(), Path::to_path_buf)
}

impl RunManifest {
    pub fn new(out_dir: &Path, config_path: Option<PathBuf>, settings: RunSettings) -> Self {
        let now = now_unix();
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path,
            out_dir: out_dir.to_path_buf(),
            settings,
            completed: BTreeMap::new(),
            artifacts: Vec::new(),
            created_unix: now,
            updated_unix: now,
        }
    }

    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    pub fn load(out: &Path) -> CliResult<Self> {
        let path = Self::path(out);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn save(&mut self) -> CliResult<()> {
        self.updated_unix = now_unix();
        self.artifacts.sort();
        self.artifacts.dedup();
        let path = Self::path(&self.out_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_error(path.display()))
    }

    pub fn is_complete(&self, variant: Variant, fold: usize) -> bool {
        self.completed.get(variant.name()).is_some_and(|f| f.contains(&fold))
    }

    pub fn mark_complete(&mut self, variant: Variant, fold: usize) {
        let list = self.completed.entry(variant.name().to_string()).or_default();
        if !list.contains(&fold) {
            list.push(fold);
            list.sort_unstable();
        }
    }

    pub fn add_artifact(&mut self, path: &Path) {
        let rel = relative(&self.out_dir, path);
        self.artifacts.push(rel);
    }
}
