//! Which image scale a layer description matches best.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::LayerRef;
use crate::error::{Error, Result};
use crate::image::ImageInput;

pub const DEFAULT_CROPS: [usize; 3] = [32, 64, 128];

/// Image and text encoders sharing one embedding space.
pub trait JointEmbedder: Send + Sync {
    fn embed_image(&self, image: &ImageInput) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSize {
    Crop(usize),
    Full,
}

impl fmt::Display for PatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchSize::Crop(s) => write!(f, "{s}"),
            PatchSize::Full => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchChoice {
    pub layer: LayerRef,
    pub best: PatchSize,
    /// Cosine similarity per candidate, smallest crop first.
    pub similarities: Vec<(PatchSize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchCoherenceResult {
    pub choices: Vec<PatchChoice>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Adapter(format!(
            "embedding sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// For each `(layer, description)`, the centre crop (or the full image) whose
/// embedding is most similar. Ties go to the smaller crop.
pub fn patch_coherence(
    image: &ImageInput,
    descriptions: &[(LayerRef, String)],
    embedder: Option<&dyn JointEmbedder>,
    crops: &[usize],
) -> Result<PatchCoherenceResult> {
    let embedder =
        embedder.ok_or_else(|| Error::config("patch coherence needs a joint embedder"))?;
    let mut sizes: Vec<usize> = crops.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut candidates = Vec::with_capacity(sizes.len() + 1);
    for &s in &sizes {
        let crop = image.center_crop(s)?;
        candidates.push((PatchSize::Crop(s), embedder.embed_image(&crop)?));
    }
    candidates.push((PatchSize::Full, embedder.embed_image(image)?));

    let mut choices = Vec::with_capacity(descriptions.len());
    for (layer, text) in descriptions {
        let t = embedder.embed_text(text)?;
        let mut similarities = Vec::with_capacity(candidates.len());
        let mut best = (candidates[0].0, f64::NEG_INFINITY);
        for (size, e) in &candidates {
            let s = cosine(&t, e)?;
            if !s.is_finite() {
                return Err(Error::Adapter(format!("similarity {s} for crop {size}")));
            }
            if s > best.1 {
                best = (*size, s);
            }
            similarities.push((*size, s));
        }
        choices.push(PatchChoice {
            layer: layer.clone(),
            best: best.0,
            similarities,
        });
    }
    Ok(PatchCoherenceResult { choices })
}

/// Per layer, how often each patch size won.
pub fn tally(results: &[PatchCoherenceResult]) -> BTreeMap<LayerRef, BTreeMap<PatchSize, usize>> {
    let mut h: BTreeMap<LayerRef, BTreeMap<PatchSize, usize>> = BTreeMap::new();
    for r in results {
        for c in &r.choices {
            *h.entry(c.layer.clone())
                .or_default()
                .entry(c.best)
                .or_default() += 1;
        }
    }
    h
}
