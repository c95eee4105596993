use std::fs;
use std::path::{Path, PathBuf};

use podnet_core::{EnvSpec, PlannerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "PODNET_SEED";

/// Experiment configuration file. Every section is optional and unknown keys
/// are rejected at any depth.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvSpec>,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.planner.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(env) = &self.env {
            env.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// Seed precedence: command-line flag, then `PODNET_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        if let Some(seed) = flag {
            self.train.seed = seed;
        } else if let Ok(value) = std::env::var(SEED_ENV) {
            self.train.seed = value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={value:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Parse `"x,y,..."` into a state vector.
pub fn parse_vector(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{part}` is not a number in `{text}`"))
        })
        .collect()
}
