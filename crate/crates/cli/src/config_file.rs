//! TOML pipeline configuration. Missing keys fall back to the documented
//! defaults; unknown keys are rejected to catch typos.

use a2v_core::config::PipelineConfig;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("config parse: {0}")]
    Parse(String),
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Unreadable {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }
}
