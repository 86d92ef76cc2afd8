use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use stitch_core::embedding::EmbedderConfig;
use stitch_core::retrieval::{DEFAULT_K_RETRIEVE, DEFAULT_TOKEN_BUDGET};
use stitch_core::{GatewayConfig, IngestionConfig, RetrievalConfig};

use crate::error::usage;

/// Optional TOML file with one table per component.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub gateway: GatewayConfig,
    pub embedder: EmbedderConfig,
    pub ingestion: IngestionConfig,
    pub retrieval: RetrievalConfig,
}

impl StitchConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.ingestion.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: String,
    pub store_root: PathBuf,
    pub gateway_config: Option<PathBuf>,
    pub budget: usize,
    pub k_retrieve: usize,
    pub auth_token: Option<String>,
    /// Serve requests even when the model provider is unreachable.
    pub degraded: bool,
}

impl ServiceConfig {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            store_root: store_root.into(),
            gateway_config: None,
            budget: DEFAULT_TOKEN_BUDGET,
            k_retrieve: DEFAULT_K_RETRIEVE,
            auth_token: None,
            degraded: false,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.budget == 0 {
            return Err(usage("budget must be at least 1"));
        }
        if self.k_retrieve == 0 {
            return Err(usage("k_retrieve must be at least 1"));
        }
        if !self.store_root.is_dir() {
            return Err(usage(format!("store root {} does not exist", self.store_root.display())));
        }
        Ok(())
    }
}
