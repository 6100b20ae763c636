use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the directory relative weight paths resolve against.
pub const MODEL_CACHE_ENV: &str = "FEATSPEAK_MODEL_CACHE";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Seed(u64),
    File(PathBuf),
}

impl WeightSource {
    /// Parses `seed:<n>`, `file:<path>` or a bare path. Relative paths are
    /// resolved against `cache_dir`, then `$FEATSPEAK_MODEL_CACHE`.
    pub fn parse(uri: &str, cache_dir: Option<&Path>) -> Result<Self> {
        if let Some(seed) = uri.strip_prefix("seed:") {
            return seed
                .trim()
                .parse()
                .map(WeightSource::Seed)
                .map_err(|_| Error::config(format!("bad weight seed in `{uri}`")));
        }
        let raw = uri
            .strip_prefix("file://")
            .or_else(|| uri.strip_prefix("file:"))
            .unwrap_or(uri);
        if raw.contains("://") {
            return Err(Error::config(format!(
                "remote weight source `{uri}` is not supported; download it into the model cache"
            )));
        }
        let path = PathBuf::from(raw);
        if path.is_absolute() {
            return Ok(WeightSource::File(path));
        }
        let base = cache_dir
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(MODEL_CACHE_ENV).map(PathBuf::from));
        Ok(WeightSource::File(match base {
            Some(b) => b.join(path),
            None => path,
        }))
    }
}

/// `$FEATSPEAK_MODEL_CACHE` when set, else `fallback`.
pub fn model_cache_dir(fallback: Option<&Path>) -> Option<PathBuf> {
    std::env::var_os(MODEL_CACHE_ENV)
        .map(PathBuf::from)
        .or_else(|| fallback.map(Path::to_path_buf))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}
