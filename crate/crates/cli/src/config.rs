use std::path::Path;

use anyhow::Context;
use flowspike::error::Error;
use flowspike::network::ArchConfig;
use flowspike::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a `--config` JSON file may set. Missing keys keep defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Aggregation window in microseconds.
    pub window_us: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.arch.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
