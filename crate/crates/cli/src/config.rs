//! TOML app configuration: endpoint, corpus, run defaults, output dir.

use anyhow::{Context, Result};
use graphrun::{HttpPolicyConfig, RunConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a command may need; sections are optional, flags override.
/// Credentials never live here — `endpoint.api_key_env` names an
/// environment variable instead, so the file stays shareable.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub corpus: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub endpoint: Option<HttpPolicyConfig>,
    pub run: Option<RunConfig>,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(AppConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
            }
        }
    }

    pub fn run_config(&self) -> RunConfig {
        self.run.clone().unwrap_or_default()
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
