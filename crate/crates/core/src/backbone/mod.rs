//! Frozen vision backbones, their explained layers, and pooling/selection
//! over spatial feature maps.

mod resnet;
mod toy;
mod vit;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Precision, WeightSource};
use crate::error::{Error, Result};
use crate::image::{ImageInput, Normalization};
use crate::nn::FrozenStore;

pub use resnet::ResNet50;
pub use toy::ToyConvNet;
pub use vit::{tokens_to_grid, VisionTransformer};

/// Stable name of a tapped layer, e.g. `L49` or `stage3`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerRef(pub String);

impl LayerRef {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerRef {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainedLayer {
    pub layer: LayerRef,
    pub dims: LayerDims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub model_id: String,
    /// Ordered; the position of a layer here is its slot in the translator.
    pub layers: Vec<ExplainedLayer>,
    pub input_size: (usize, usize),
    pub normalization: Normalization,
}

impl BackboneSpec {
    pub fn layer_index(&self, layer: &LayerRef) -> Option<usize> {
        self.layers.iter().position(|l| &l.layer == layer)
    }

    pub fn dims(&self, layer: &LayerRef) -> Result<LayerDims> {
        self.layers
            .iter()
            .find(|l| &l.layer == layer)
            .map(|l| l.dims)
            .ok_or_else(|| {
                Error::config(format!(
                    "layer `{layer}` is not explained by `{}`",
                    self.model_id
                ))
            })
    }

    pub fn layer_refs(&self) -> Vec<LayerRef> {
        self.layers.iter().map(|l| l.layer.clone()).collect()
    }

    /// Hash of the layer registry, stored in checkpoints to catch mismatched backbones.
    pub fn registry_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_id.as_bytes());
        for l in &self.layers {
            h.update(l.layer.0.as_bytes());
            for d in [l.dims.height, l.dims.width, l.dims.channels] {
                h.update((d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Activations of one layer for one image, stored `H x W x C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatureMap {
    layer: LayerRef,
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl SpatialFeatureMap {
    pub fn new(
        layer: LayerRef,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::integrity(format!(
                "layer `{layer}` has an empty grid"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::integrity(format!(
                "layer `{layer}`: {} values for {height}x{width}x{channels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::integrity(format!(
                "layer `{layer}` produced non-finite activations"
            )));
        }
        Ok(Self {
            layer,
            height,
            width,
            channels,
            values,
        })
    }

    pub fn layer(&self) -> &LayerRef {
        &self.layer
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vector(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.width + j) * self.channels;
        &self.values[o..o + self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Pooled,
    Location { i: usize, j: usize },
    NeuronExemplar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub layer: LayerRef,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// SHA-256 of the raw values; lets callers confirm which vector was decoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.layer.0.as_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-location keep flags for masked pooling, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepGrid {
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
}

impl KeepGrid {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![true; height * width],
        }
    }

    pub fn only(height: usize, width: usize, i: usize, j: usize) -> Self {
        let mut keep = vec![false; height * width];
        keep[i * width + j] = true;
        Self {
            height,
            width,
            keep,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.width + j]
    }
}

/// Mean over the kept spatial vectors; without a mask, over all of them.
/// Dropped vectors are excluded outright, nothing is rescaled.
pub fn pool_features(map: &SpatialFeatureMap, mask: Option<&KeepGrid>) -> Result<FeatureVector> {
    if let Some(m) = mask {
        if m.height != map.height || m.width != map.width {
            return Err(Error::integrity(format!(
                "mask {}x{} does not match layer `{}` grid {}x{}",
                m.height, m.width, map.layer, map.height, map.width
            )));
        }
        if m.kept() == 0 {
            return Err(Error::InvalidMask(format!(
                "every location of layer `{}` is masked",
                map.layer
            )));
        }
    }
    let c = map.channels;
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for i in 0..map.height {
        for j in 0..map.width {
            if mask.is_none_or(|m| m.get(i, j)) {
                for (s, v) in sum.iter_mut().zip(map.vector(i, j)) {
                    *s += v;
                }
                count += 1;
            }
        }
    }
    let n = count as f64;
    Ok(FeatureVector {
        layer: map.layer.clone(),
        values: sum.into_iter().map(|s| s / n).collect(),
        provenance: Provenance::Pooled,
    })
}

pub fn select_location(map: &SpatialFeatureMap, i: usize, j: usize) -> Result<FeatureVector> {
    if i >= map.height || j >= map.width {
        return Err(Error::Bounds {
            row: i,
            col: j,
            height: map.height,
            width: map.width,
        });
    }
    Ok(FeatureVector {
        layer: map.layer.clone(),
        values: map.vector(i, j).to_vec(),
        provenance: Provenance::Location { i, j },
    })
}

/// Mean of the pooled vectors of a neuron's (already activation-masked) exemplars.
pub fn pool_neuron_exemplars(exemplars: &[SpatialFeatureMap]) -> Result<FeatureVector> {
    let first = exemplars
        .first()
        .ok_or_else(|| Error::argument("neuron exemplar set is empty"))?;
    let mut sum = vec![0.0; first.channels];
    for ex in exemplars {
        if ex.layer != first.layer || ex.channels != first.channels {
            return Err(Error::integrity(
                "neuron exemplars must come from the same layer",
            ));
        }
        let pooled = pool_features(ex, None)?;
        for (s, v) in sum.iter_mut().zip(&pooled.values) {
            *s += v;
        }
    }
    let n = exemplars.len() as f64;
    Ok(FeatureVector {
        layer: first.layer.clone(),
        values: sum.into_iter().map(|s| s / n).collect(),
        provenance: Provenance::NeuronExemplar,
    })
}

/// Activations requested for one forward pass, keyed by tap name.
pub struct Taps {
    wanted: Vec<LayerRef>,
    captured: HashMap<LayerRef, Tensor>,
}

impl Taps {
    pub fn new(wanted: &[LayerRef]) -> Self {
        Self {
            wanted: wanted.to_vec(),
            captured: HashMap::new(),
        }
    }

    pub fn wants(&self, name: &str) -> bool {
        self.wanted.iter().any(|l| l.0 == name)
    }

    /// Stores `(B, C, H, W)` activations if `name` was requested.
    pub fn record(&mut self, name: &str, nchw: &Tensor) {
        if self.wants(name) {
            self.captured.insert(LayerRef::new(name), nchw.clone());
        }
    }

    /// All requested taps have fired; models may stop early.
    pub fn complete(&self) -> bool {
        self.wanted.iter().all(|l| self.captured.contains_key(l))
    }

    fn take(&mut self, layer: &LayerRef) -> Option<Tensor> {
        self.captured.remove(layer)
    }
}

/// A frozen network that can report intermediate activations.
pub trait VisionModel: Send + Sync {
    /// Every tap this model can record, in forward order.
    fn tap_names(&self) -> Vec<LayerRef>;

    /// Runs on a normalised `(B, 3, H, W)` batch, recording requested taps.
    fn forward(&self, input: &Tensor, taps: &mut Taps) -> Result<()>;

    fn parameters(&self) -> &[(String, Tensor)];

    fn parameter_digest(&self) -> Result<String> {
        crate::nn::tensor_digest(self.parameters().iter().map(|(n, t)| (n.as_str(), t)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Strided 3x3 conv stages with random frozen weights; one tap per stage.
    ToyConv {
        channels: Vec<usize>,
    },
    Resnet50,
    Vit {
        patch_size: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
    },
}

/// Backbone registry entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub model_id: String,
    pub architecture: Architecture,
    /// `seed:<n>` for deterministic random weights, otherwise a safetensors path.
    pub weights: String,
    pub explained_layers: Vec<String>,
    pub input_size: [usize; 2],
    pub normalization: Normalization,
    #[serde(default)]
    pub precision: Precision,
}

impl BackboneConfig {
    /// Three-stage toy network on 32x32 inputs, explained at every stage.
    pub fn toy() -> Self {
        Self {
            model_id: "toy-conv".into(),
            architecture: Architecture::ToyConv {
                channels: vec![16, 32, 64],
            },
            weights: "seed:17".into(),
            explained_layers: vec!["stage1".into(), "stage2".into(), "stage3".into()],
            input_size: [32, 32],
            normalization: Normalization {
                mean: [0.5; 3],
                std: [0.25; 3],
            },
            precision: Precision::F64,
        }
    }

    pub fn resnet50(weights: &str) -> Self {
        Self {
            model_id: "resnet50".into(),
            architecture: Architecture::Resnet50,
            weights: weights.into(),
            explained_layers: vec!["L49".into(), "L39".into(), "L21".into()],
            input_size: [224, 224],
            normalization: Normalization::IMAGENET,
            precision: Precision::F32,
        }
    }
}

pub struct Backbone {
    spec: BackboneSpec,
    model: Box<dyn VisionModel>,
    dtype: DType,
    device: Device,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("spec", &self.spec)
            .finish()
    }
}

impl Backbone {
    pub fn from_config(cfg: &BackboneConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let dtype = cfg.precision.dtype();
        let device = Device::Cpu;
        let mut store = match WeightSource::parse(&cfg.weights, cache_dir)? {
            WeightSource::Seed(seed) => FrozenStore::seeded(seed, dtype, device.clone()),
            WeightSource::File(path) => {
                FrozenStore::from_safetensors(&path, dtype, device.clone())?
            }
        };
        let model: Box<dyn VisionModel> = match &cfg.architecture {
            Architecture::ToyConv { channels } => Box::new(ToyConvNet::new(&mut store, channels)?),
            Architecture::Resnet50 => Box::new(ResNet50::new(&mut store)?),
            Architecture::Vit {
                patch_size,
                dim,
                depth,
                heads,
                mlp_dim,
            } => Box::new(VisionTransformer::new(
                &mut store,
                cfg.input_size,
                *patch_size,
                *dim,
                *depth,
                *heads,
                *mlp_dim,
            )?),
        };
        let layers = cfg
            .explained_layers
            .iter()
            .map(|s| LayerRef::new(s.as_str()))
            .collect();
        Self::new(
            cfg.model_id.clone(),
            model,
            layers,
            (cfg.input_size[0], cfg.input_size[1]),
            cfg.normalization,
            dtype,
        )
    }

    /// Validates the explained layers and records their dims from a probe pass
    /// on a blank image.
    pub fn new(
        model_id: String,
        model: Box<dyn VisionModel>,
        explained: Vec<LayerRef>,
        input_size: (usize, usize),
        normalization: Normalization,
        dtype: DType,
    ) -> Result<Self> {
        if explained.is_empty() {
            return Err(Error::config(
                "a backbone needs at least one explained layer",
            ));
        }
        let known = model.tap_names();
        for l in &explained {
            if !known.contains(l) {
                return Err(Error::config(format!(
                    "`{model_id}` has no layer `{l}` (known: {})",
                    known
                        .iter()
                        .map(|k| k.0.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !explained.iter().all(|l| seen.insert(l)) {
            return Err(Error::config("explained layers must be distinct"));
        }
        let device = Device::Cpu;
        let probe = Tensor::zeros((1, 3, input_size.0, input_size.1), dtype, &device)?;
        let mut taps = Taps::new(&explained);
        model.forward(&probe, &mut taps)?;
        let mut layers = Vec::with_capacity(explained.len());
        for l in explained {
            let t = taps
                .take(&l)
                .ok_or_else(|| Error::integrity(format!("tap `{l}` did not fire")))?;
            let (_, c, h, w) = t.dims4()?;
            layers.push(ExplainedLayer {
                layer: l,
                dims: LayerDims {
                    height: h,
                    width: w,
                    channels: c,
                },
            });
        }
        Ok(Self {
            spec: BackboneSpec {
                model_id,
                layers,
                input_size,
                normalization,
            },
            model,
            dtype,
            device,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn parameter_digest(&self) -> Result<String> {
        self.model.parameter_digest()
    }

    /// Frozen weights by name.
    pub fn parameters(&self) -> &[(String, Tensor)] {
        self.model.parameters()
    }

    /// One map per explained layer, in spec order.
    pub fn extract_features(&self, image: &ImageInput) -> Result<Vec<SpatialFeatureMap>> {
        Ok(self
            .extract_batch(std::slice::from_ref(image))?
            .pop()
            .expect("one image in, one result out"))
    }

    pub fn extract_batch(&self, images: &[ImageInput]) -> Result<Vec<Vec<SpatialFeatureMap>>> {
        self.extract_layers(images, &self.spec.layer_refs())
    }

    /// Like [`Backbone::extract_batch`] for a subset of the explained layers.
    pub fn extract_layers(
        &self,
        images: &[ImageInput],
        layers: &[LayerRef],
    ) -> Result<Vec<Vec<SpatialFeatureMap>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let expected: Vec<LayerDims> = layers
            .iter()
            .map(|l| self.spec.dims(l))
            .collect::<Result<_>>()?;
        let (h, w) = self.spec.input_size;
        let mut batch = Vec::with_capacity(images.len());
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::integrity(format!(
                    "image is {}x{}, `{}` expects {h}x{w}",
                    img.height(),
                    img.width(),
                    self.spec.model_id
                )));
            }
            batch.push(img.to_tensor(&self.spec.normalization, self.dtype, &self.device)?);
        }
        let input = Tensor::stack(&batch, 0)?;
        let mut taps = Taps::new(layers);
        self.model.forward(&input, &mut taps)?;

        let mut out: Vec<Vec<SpatialFeatureMap>> = (0..images.len()).map(|_| Vec::new()).collect();
        for (layer, dims) in layers.iter().zip(expected) {
            let t = taps
                .take(layer)
                .ok_or_else(|| Error::integrity(format!("tap `{layer}` did not fire")))?;
            let (b, c, hh, ww) = t.dims4()?;
            if (c, hh, ww) != (dims.channels, dims.height, dims.width) || b != images.len() {
                return Err(Error::integrity(format!(
                    "layer `{layer}` produced {c}x{hh}x{ww}, spec declares {}x{}x{}",
                    dims.channels, dims.height, dims.width
                )));
            }
            let hwc = t
                .permute((0, 2, 3, 1))?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            let per = hh * ww * c;
            for (i, chunk) in hwc.chunks_exact(per).enumerate() {
                out[i].push(SpatialFeatureMap::new(
                    layer.clone(),
                    hh,
                    ww,
                    c,
                    chunk.to_vec(),
                )?);
            }
        }
        Ok(out)
    }
}
