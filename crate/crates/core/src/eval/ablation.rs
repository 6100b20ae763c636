//! Comparing trained translators under all-layer and single-layer inference.

use std::sync::Arc;

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::lm::{generate_batch, GenerationConfig, LanguageModel};
use crate::trainer::{evaluate_loss, pooled_features, Checkpoint, LayerMode, PreparedExample};
use crate::translator::Translator;

use super::{caption_metrics, CaptionScorer, MetricReport};

pub struct AblationModel {
    pub name: String,
    pub translator: Arc<Translator>,
}

impl AblationModel {
    pub fn from_checkpoint(
        name: impl Into<String>,
        ckpt: &Checkpoint,
        spec: &BackboneSpec,
    ) -> Result<Self> {
        if ckpt.manifest.registry_hash != spec.registry_hash() {
            return Err(Error::config(format!(
                "checkpoint was trained on backbone {}, not {}",
                ckpt.manifest.registry_hash, spec.model_id
            )));
        }
        let t = Translator::from_tensors(
            ckpt.manifest.translator.clone(),
            &ckpt.weights,
            candle_core::DType::F64,
        )?;
        Ok(Self {
            name: name.into(),
            translator: Arc::new(t),
        })
    }
}

pub fn mode_label(mode: &LayerMode) -> String {
    match mode {
        LayerMode::All => "all".into(),
        LayerMode::Single(l) => format!("single:{l}"),
    }
}

/// Greedy captions for pooled features under `mode`.
pub fn generate_captions(
    translator: &Translator,
    lm: &dyn LanguageModel,
    data: &[PreparedExample],
    mode: &LayerMode,
    cfg: &GenerationConfig,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let features = chunk
            .iter()
            .map(|e| pooled_features(&e.maps, mode))
            .collect::<Result<Vec<_>>>()?;
        let prompts = translator
            .translate_batch(&features)?
            .to_dtype(lm.dtype())?;
        out.extend(
            generate_batch(lm, &prompts, cfg)?
                .into_iter()
                .map(|g| g.sequence.text),
        );
    }
    Ok(out)
}

/// One report per model and mode, with the evaluation loss under `"loss"` and
/// each scorer's value under its name.
pub fn run_ablation(
    models: &[AblationModel],
    lm: &dyn LanguageModel,
    data: &[PreparedExample],
    references: &[Vec<String>],
    modes: &[LayerMode],
    scorers: &[&dyn CaptionScorer],
    dataset: &str,
) -> Result<Vec<MetricReport>> {
    if models.len() < 2 {
        return Err(Error::argument("an ablation compares at least two models"));
    }
    if data.len() != references.len() {
        return Err(Error::argument(format!(
            "{} examples for {} reference sets",
            data.len(),
            references.len()
        )));
    }
    for m in models {
        for mode in modes {
            if let LayerMode::Single(layer) = mode {
                if m.translator.config().slot(layer).is_none() {
                    return Err(Error::config(format!(
                        "model `{}` has no input slot for layer `{layer}`",
                        m.name
                    )));
                }
            }
        }
    }
    let mut reports = Vec::with_capacity(models.len() * modes.len());
    for m in models {
        for mode in modes {
            let hyps =
                generate_captions(&m.translator, lm, data, mode, &GenerationConfig::CAPTION)?;
            let mut r = caption_metrics(&hyps, references, scorers, dataset, &m.name)?;
            r.setting = mode_label(mode);
            r.values
                .insert("loss".into(), evaluate_loss(&m.translator, lm, data, mode)?);
            reports.push(r);
        }
    }
    Ok(reports)
}
