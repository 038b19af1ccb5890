//! Run configuration and its provenance hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::saliency::SaliencyConfig;
use crate::scorer::ScoringConfig;
use crate::select::Budget;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub saliency: SaliencyConfig,
    pub scoring: ScoringConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<Budget>,
}

#[derive(Serialize)]
struct Hashed<'a> {
    saliency: &'a SaliencyConfig,
    scoring: &'a ScoringConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.saliency
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scoring
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(b) = &self.budget {
            b.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 over the compact JSON of the saliency and scoring settings.
    /// The budget is left out: selecting a different coreset size from the
    /// same score file is not a mismatch.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&Hashed {
            saliency: &self.saliency,
            scoring: &self.scoring,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
