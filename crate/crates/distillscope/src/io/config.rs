//! Run configuration: one JSON file describing dataset, models, and
//! hyperparameters for a pipeline invocation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{StudentConfig, TeacherConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest path; subcommands that need data require it
    /// (here or via a generated synthetic dataset).
    pub dataset: Option<PathBuf>,
    pub teacher: Option<TeacherConfig>,
    pub student: Option<StudentConfig>,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Default output directory; the `--out` flag overrides it.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.display().to_string(),
            msg: format!("config parse error: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Effective seed under the documented precedence: `--seed` flag, then
    /// the `DISTILLSCOPE_SEED` environment variable, then the config value.
    pub fn resolve_seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(text) = env {
            return text.trim().parse().map_err(|_| {
                Error::Config(format!("DISTILLSCOPE_SEED must be a u64, got '{text}'"))
            });
        }
        Ok(self.seed)
    }
}
