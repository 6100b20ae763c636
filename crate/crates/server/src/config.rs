use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use featspeak::backbone::{Backbone, BackboneConfig};
use featspeak::candle_core::DType;
use featspeak::explain::Explainer;
use featspeak::lm::{load_language_model, LmConfig};
use featspeak::trainer::Checkpoint;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub max_upload_bytes: usize,
    pub session_ttl_secs: u64,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            max_upload_bytes: 10 * 1024 * 1024,
            session_ttl_secs: 30 * 60,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub backbone: BackboneConfig,
    pub lm: LmConfig,
    /// Trained translator checkpoint.
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default)]
    pub server: ServerSettings,
    pub models: Vec<ModelEntry>,
}

impl ServiceConfig {
    pub fn read(path: &Path) -> featspeak::Result<Self> {
        featspeak::config::read_toml(path)
    }
}

/// Loaded models, immutable once the server starts.
#[derive(Clone, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<Explainer>>,
}

impl Registry {
    /// Loads every model; relative paths resolve against `base`, or the model
    /// cache directory for weights and tokenizers.
    pub fn load(cfg: &ServiceConfig, base: &Path) -> featspeak::Result<Self> {
        let cache = featspeak::config::model_cache_dir(Some(base));
        let mut reg = Self::default();
        for m in &cfg.models {
            let backbone = Arc::new(Backbone::from_config(&m.backbone, cache.as_deref())?);
            let lm = load_language_model(&m.lm, cache.as_deref())?;
            let path = if m.checkpoint.is_absolute() {
                m.checkpoint.clone()
            } else {
                base.join(&m.checkpoint)
            };
            let ckpt = Checkpoint::load(&path, DType::F64)?;
            let ex = Explainer::from_checkpoint(backbone, lm, &ckpt)?;
            log::info!("loaded model `{}` from {}", m.id, path.display());
            reg.insert(m.id.clone(), ex);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, id: impl Into<String>, explainer: Explainer) {
        self.models.insert(id.into(), Arc::new(explainer));
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Explainer>> {
        self.models.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.models.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}
