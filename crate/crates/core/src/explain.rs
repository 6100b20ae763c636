//! Inference-time use of a trained translator: per-location and per-layer
//! descriptions, query saliency maps and neuron descriptions.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    pool_features, pool_neuron_exemplars, select_location, Backbone, FeatureVector, LayerRef,
    Provenance, SpatialFeatureMap,
};
use crate::error::{Error, Result};
use crate::image::{Grid, ImageInput};
use crate::lm::{generate_batch, score_query_batch, Generation, GenerationConfig, LanguageModel};
use crate::trainer::{check_compatible, Checkpoint};
use crate::translator::Translator;

/// Layer name used for descriptions decoded from all layers together.
pub const ALL_LAYERS: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDescription {
    pub layer: LayerRef,
    pub provenance: Provenance,
    pub text: String,
    pub tokens: Vec<u32>,
    pub token_log_probs: Vec<f64>,
    /// Digest of the decoded feature vector(s).
    pub feature_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: LayerRef,
    pub query: String,
    /// Summed query log-likelihood per grid cell.
    pub scores: Grid,
    /// Min-max normalised scores, bilinearly resized to the input resolution.
    pub heatmap: Grid,
    pub raw_min: f64,
    pub raw_max: f64,
    pub query_tokens: usize,
}

impl SaliencyMap {
    pub fn argmax(&self) -> (usize, usize) {
        self.scores.argmax()
    }
}

pub struct Explainer {
    backbone: Arc<Backbone>,
    translator: Arc<Translator>,
    lm: Arc<dyn LanguageModel>,
    /// Locations scored per forward pass when building saliency maps.
    pub saliency_chunk: usize,
}

impl Explainer {
    pub fn new(
        backbone: Arc<Backbone>,
        translator: Arc<Translator>,
        lm: Arc<dyn LanguageModel>,
    ) -> Result<Self> {
        check_compatible(backbone.spec(), lm.as_ref(), translator.config())?;
        Ok(Self {
            backbone,
            translator,
            lm,
            saliency_chunk: 256,
        })
    }

    /// Rebuilds the translator stored in `ckpt`, which must have been trained
    /// on this backbone's explained layers.
    pub fn from_checkpoint(
        backbone: Arc<Backbone>,
        lm: Arc<dyn LanguageModel>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if ckpt.manifest.registry_hash != backbone.spec().registry_hash() {
            return Err(Error::config(format!(
                "checkpoint was trained on other explained layers than `{}` declares",
                backbone.spec().model_id
            )));
        }
        let translator = Translator::from_tensors(
            ckpt.manifest.translator.clone(),
            &ckpt.weights,
            candle_core::DType::F64,
        )?;
        Self::new(backbone, Arc::new(translator), lm)
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn translator(&self) -> &Arc<Translator> {
        &self.translator
    }

    pub fn language_model(&self) -> &Arc<dyn LanguageModel> {
        &self.lm
    }

    fn ready(&self) -> Result<()> {
        if self.translator.is_trained() {
            Ok(())
        } else {
            Err(Error::State(
                "translator has not been trained or loaded from a checkpoint".into(),
            ))
        }
    }

    pub fn features(&self, image: &ImageInput) -> Result<Vec<SpatialFeatureMap>> {
        self.backbone.extract_features(image)
    }

    fn map<'a>(
        &self,
        maps: &'a [SpatialFeatureMap],
        layer: &LayerRef,
    ) -> Result<&'a SpatialFeatureMap> {
        self.backbone.spec().dims(layer)?;
        maps.iter()
            .find(|m| m.layer() == layer)
            .ok_or_else(|| Error::integrity(format!("no extracted map for layer `{layer}`")))
    }

    fn decode(
        &self,
        layer: LayerRef,
        features: Vec<FeatureVector>,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        let provenance = features[0].provenance;
        let digest = if features.len() == 1 {
            features[0].digest()
        } else {
            features
                .iter()
                .map(FeatureVector::digest)
                .collect::<Vec<_>>()
                .join(":")
        };
        let prompts = self.translator.translate_batch(&[features])?;
        let g = generate_batch(self.lm.as_ref(), &prompts.to_dtype(self.lm.dtype())?, cfg)?
            .pop()
            .expect("one prompt in, one generation out");
        Ok(describe(layer, provenance, g, digest))
    }

    pub fn describe_location_in(
        &self,
        maps: &[SpatialFeatureMap],
        layer: &LayerRef,
        i: usize,
        j: usize,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        let v = select_location(self.map(maps, layer)?, i, j)?;
        self.decode(layer.clone(), vec![v], cfg)
    }

    pub fn describe_location(
        &self,
        image: &ImageInput,
        layer: &LayerRef,
        i: usize,
        j: usize,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        self.describe_location_in(&self.features(image)?, layer, i, j, cfg)
    }

    /// Decodes the spatial mean of one layer.
    pub fn describe_layer_in(
        &self,
        maps: &[SpatialFeatureMap],
        layer: &LayerRef,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        let v = pool_features(self.map(maps, layer)?, None)?;
        self.decode(layer.clone(), vec![v], cfg)
    }

    pub fn describe_layer(
        &self,
        image: &ImageInput,
        layer: &LayerRef,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        self.describe_layer_in(&self.features(image)?, layer, cfg)
    }

    /// Captioning mode: pooled features of every explained layer decoded jointly.
    pub fn describe_all_layers_in(
        &self,
        maps: &[SpatialFeatureMap],
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        let features = self
            .backbone
            .spec()
            .layer_refs()
            .iter()
            .map(|l| pool_features(self.map(maps, l)?, None))
            .collect::<Result<Vec<_>>>()?;
        self.decode(LayerRef::new(ALL_LAYERS), features, cfg)
    }

    pub fn describe_image(
        &self,
        image: &ImageInput,
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        self.describe_all_layers_in(&self.features(image)?, cfg)
    }

    /// Decodes the mean of the pooled exemplar maps of one unit.
    pub fn describe_neuron(
        &self,
        exemplars: &[SpatialFeatureMap],
        cfg: &GenerationConfig,
    ) -> Result<LocalDescription> {
        self.ready()?;
        let v = pool_neuron_exemplars(exemplars)?;
        self.decode(v.layer.clone(), vec![v], cfg)
    }

    /// Query log-likelihood for every location of `layer`, each conditioned
    /// on that location's feature alone.
    pub fn saliency_in(
        &self,
        maps: &[SpatialFeatureMap],
        layer: &LayerRef,
        query: &str,
    ) -> Result<SaliencyMap> {
        self.ready()?;
        if query.trim().is_empty() {
            return Err(Error::argument("query is empty"));
        }
        let map = self.map(maps, layer)?;
        let (h, w) = (map.height(), map.width());
        let mut scores = Vec::with_capacity(h * w);
        let mut query_tokens = 0;
        let cells: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
        for chunk in cells.chunks(self.saliency_chunk.max(1)) {
            let batch = chunk
                .iter()
                .map(|&(i, j)| Ok(vec![select_location(map, i, j)?]))
                .collect::<Result<Vec<_>>>()?;
            let prompts = self
                .translator
                .translate_batch(&batch)?
                .to_dtype(self.lm.dtype())?;
            for s in score_query_batch(self.lm.as_ref(), &prompts, query)? {
                query_tokens = s.token_count();
                scores.push(s.total);
            }
        }
        let scores = Grid::new(h, w, scores)?;
        if scores.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::integrity(format!(
                "query `{query}` produced non-finite scores"
            )));
        }
        let (raw_min, raw_max) = scores.min_max();
        let (ih, iw) = self.backbone.spec().input_size;
        let heatmap = scores.min_max_normalized().upsample_bilinear(ih, iw);
        Ok(SaliencyMap {
            layer: layer.clone(),
            query: query.to_string(),
            scores,
            heatmap,
            raw_min,
            raw_max,
            query_tokens,
        })
    }

    pub fn saliency(
        &self,
        image: &ImageInput,
        layer: &LayerRef,
        query: &str,
    ) -> Result<SaliencyMap> {
        self.ready()?;
        if query.trim().is_empty() {
            return Err(Error::argument("query is empty"));
        }
        self.saliency_in(&self.features(image)?, layer, query)
    }

    /// Batched greedy captions for pooled feature sets.
    pub fn generate_for(
        &self,
        features: &[Vec<FeatureVector>],
        cfg: &GenerationConfig,
    ) -> Result<Vec<Generation>> {
        self.ready()?;
        let prompts: Tensor = self.translator.translate_batch(features)?;
        generate_batch(self.lm.as_ref(), &prompts.to_dtype(self.lm.dtype())?, cfg)
    }
}

fn describe(
    layer: LayerRef,
    provenance: Provenance,
    g: Generation,
    feature_digest: String,
) -> LocalDescription {
    LocalDescription {
        layer,
        provenance,
        text: g.sequence.text,
        tokens: g.sequence.ids,
        token_log_probs: g.token_log_probs,
        feature_digest,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapStyle {
    Gray,
    Jet,
}

fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel =
        |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// PNG encoding of a `[0, 1]` grid.
pub fn heatmap_png(grid: &Grid, style: HeatmapStyle) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let (w, h) = (grid.width as u32, grid.height as u32);
    match style {
        HeatmapStyle::Gray => {
            let px = grid
                .values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let img = image::GrayImage::from_raw(w, h, px).expect("buffer matches grid");
            img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        }
        HeatmapStyle::Jet => {
            let px = grid.values.iter().flat_map(|&v| jet(v)).collect();
            let img = image::RgbImage::from_raw(w, h, px).expect("buffer matches grid");
            img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        }
    }
    Ok(bytes)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    layer: &'a LayerRef,
    query: &'a str,
    backbone: &'a str,
    language_model: &'a str,
    raw_min: f64,
    raw_max: f64,
    scores: Vec<Vec<f64>>,
}

/// Writes the heatmap image to `path` and a JSON record with the raw
/// scores next to it (`<path>.json`).
pub fn export_heatmap(
    map: &SaliencyMap,
    path: &Path,
    style: HeatmapStyle,
    backbone_id: &str,
    lm_id: &str,
) -> Result<()> {
    std::fs::write(path, heatmap_png(&map.heatmap, style)?)?;
    let sidecar = Sidecar {
        layer: &map.layer,
        query: &map.query,
        backbone: backbone_id,
        language_model: lm_id,
        raw_min: map.raw_min,
        raw_max: map.raw_max,
        scores: map.scores.rows(),
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
