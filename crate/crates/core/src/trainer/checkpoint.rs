//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! manifest as JSON, then every tensor as little-endian `f64` values. The
//! manifest records each tensor's name, shape and offset plus a SHA-256 of
//! the tensor blob.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Schedule;
use crate::dropout::DropoutConfig;
use crate::error::{Error, Result};
use crate::translator::TranslatorConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FSPKCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub translator: TranslatorConfig,
    pub schedule: Schedule,
    pub dropout: DropoutConfig,
    pub step: usize,
    /// RNG stream positions, decimal `u128`.
    pub sampler_position: String,
    pub batch_position: String,
    pub seed: u64,
    pub registry_hash: String,
    pub lm_id: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub blob_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub weights: HashMap<String, Tensor>,
    /// AdamW moments, keyed `<param>.m` / `<param>.v`.
    pub optimizer: HashMap<String, Tensor>,
}

const WEIGHT: &str = "translator/";
const OPTIM: &str = "optimizer/";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (prefix, map) in [(WEIGHT, &self.weights), (OPTIM, &self.optimizer)] {
            let mut names: Vec<&String> = map.keys().collect();
            names.sort();
            for name in names {
                let t = &map[name];
                let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                for v in &values {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.dims().to_vec(),
                    offset,
                });
                offset += values.len();
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.tensors = entries;
        manifest.blob_sha256 = hex::encode(Sha256::digest(&blob));
        let json = serde_json::to_vec(&manifest)?;

        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            f.write_all(&blob)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupted(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| Error::Corrupted("manifest is truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::Corrupted(format!("manifest does not parse: {e}")))?;
        let blob = &bytes[20 + len..];
        if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(Error::Corrupted(
                "tensor data does not match its digest".into(),
            ));
        }
        let mut weights = HashMap::new();
        let mut optimizer = HashMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = blob
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| Error::Corrupted(format!("tensor `{}` is out of range", e.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            if let Some(name) = e.name.strip_prefix(WEIGHT) {
                weights.insert(name.to_string(), t);
            } else if let Some(name) = e.name.strip_prefix(OPTIM) {
                optimizer.insert(name.to_string(), t);
            } else {
                return Err(Error::Corrupted(format!("unexpected tensor `{}`", e.name)));
            }
        }
        Ok(Self {
            manifest,
            weights,
            optimizer,
        })
    }
}

pub(crate) fn parse_position(s: &str) -> Result<u128> {
    s.parse()
        .map_err(|_| Error::Corrupted(format!("bad RNG position `{s}`")))
}
