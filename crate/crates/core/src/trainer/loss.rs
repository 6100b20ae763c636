use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_features, FeatureVector, LayerRef, SpatialFeatureMap};
use crate::dropout::{apply, DropoutMask};
use crate::error::{Error, Result};
use crate::lm::{target_log_likelihoods, LanguageModel, Tokenizer, EOS};
use crate::translator::Translator;

/// Cached backbone output for one training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub maps: Vec<SpatialFeatureMap>,
    pub caption: String,
    /// Caption ids followed by `<eos>`.
    pub targets: Vec<u32>,
}

pub fn caption_targets(tokenizer: &Tokenizer, caption: &str) -> Result<Vec<u32>> {
    let mut ids = tokenizer.encode(caption);
    if ids.is_empty() {
        return Err(Error::argument(format!(
            "caption `{caption}` has no tokens"
        )));
    }
    ids.push(EOS);
    Ok(ids)
}

/// Which pooled layers the translator sees at evaluation time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "layer", rename_all = "snake_case")]
pub enum LayerMode {
    All,
    Single(LayerRef),
}

/// Pooled (no dropout) features for `mode`, in backbone order.
pub fn pooled_features(maps: &[SpatialFeatureMap], mode: &LayerMode) -> Result<Vec<FeatureVector>> {
    match mode {
        LayerMode::All => maps.iter().map(|m| pool_features(m, None)).collect(),
        LayerMode::Single(layer) => {
            let map = maps.iter().find(|m| m.layer() == layer).ok_or_else(|| {
                Error::config(format!("layer `{layer}` is not among the extracted layers"))
            })?;
            Ok(vec![pool_features(map, None)?])
        }
    }
}

/// Negative log-likelihood of each target, averaged over its own tokens, then
/// over the batch. Prompts are `(B, n, d)`.
pub fn sequence_loss(
    lm: &dyn LanguageModel,
    prompts: &Tensor,
    targets: &[Vec<u32>],
) -> Result<Tensor> {
    let (lp, mask) = target_log_likelihoods(lm, prompts, targets)?;
    let per_sequence = lp.sum(1)?.broadcast_div(&mask.sum(1)?)?;
    Ok(per_sequence.mean_all()?.neg()?)
}

/// Training loss for a batch under the given dropout masks.
pub fn compute_loss(
    translator: &Translator,
    lm: &dyn LanguageModel,
    batch: &[PreparedExample],
    masks: &[DropoutMask],
) -> Result<Tensor> {
    if batch.len() != masks.len() {
        return Err(Error::argument(format!(
            "{} masks for {} examples",
            masks.len(),
            batch.len()
        )));
    }
    let features = batch
        .iter()
        .zip(masks)
        .map(|(ex, m)| apply(m, &ex.maps))
        .collect::<Result<Vec<_>>>()?;
    features_loss(translator, lm, &features, batch)
}

pub fn features_loss(
    translator: &Translator,
    lm: &dyn LanguageModel,
    features: &[Vec<FeatureVector>],
    batch: &[PreparedExample],
) -> Result<Tensor> {
    let prompts = translator.forward(features)?;
    let targets: Vec<Vec<u32>> = batch.iter().map(|e| e.targets.clone()).collect();
    sequence_loss(lm, &prompts, &targets)
}

/// Fails with diagnostics when the scalar `loss` is not finite.
pub fn check_finite(loss: &Tensor, step: usize, batch: &[PreparedExample]) -> Result<f64> {
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if value.is_finite() {
        return Ok(value);
    }
    let captions: Vec<&str> = batch.iter().take(4).map(|e| e.caption.as_str()).collect();
    let bad_maps = batch
        .iter()
        .flat_map(|e| &e.maps)
        .filter(|m| m.values().iter().any(|v| !v.is_finite()))
        .count();
    Err(Error::NumericFault {
        step,
        diagnostics: format!(
            "loss {value}; batch of {} starting with {captions:?}; {bad_maps} non-finite maps",
            batch.len()
        ),
    })
}
