//! Gradient isolation checks for a training setup: the translator is probed
//! by central differences and compared with autodiff, frozen weights are
//! checked for autodiff gradients and for movement across real updates.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{compute_loss, PreparedExample, Trainer};
use crate::dropout::DropoutMask;
use crate::error::Result;
use crate::lm::{DecoderConfig, LanguageModel, ToyDecoder};
use crate::nn::FrozenStore;
use crate::translator::Translator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// Scalar translator parameters probed.
    pub translator_scalars: usize,
    /// Those whose central difference exceeds the threshold.
    pub translator_nonzero: usize,
    /// Largest `|fd - autodiff| / max(1, |fd|)`.
    pub max_autodiff_gap: f64,
    /// Scalar backbone and language model parameters.
    pub frozen_scalars: usize,
    /// Frozen tensors that autodiff produced a gradient for.
    pub frozen_with_gradient: usize,
    /// Largest `|after - before| / lr` of a frozen scalar over the updates.
    pub frozen_max_step_gradient: f64,
    /// Smallest `|after - before| / lr` seen on a translator tensor, as a
    /// contrast: trainable weights do move.
    pub translator_min_tensor_step: f64,
    pub updates: usize,
}

impl GradientCheck {
    pub fn translator_fraction(&self) -> f64 {
        self.translator_nonzero as f64 / self.translator_scalars.max(1) as f64
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn loss_value(
    translator: &Translator,
    lm: &dyn LanguageModel,
    batch: &[PreparedExample],
    masks: &[DropoutMask],
) -> Result<f64> {
    Ok(compute_loss(translator, lm, batch, masks)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// Central differences of the loss for every translator scalar, with step `h`.
/// Returns `(fd, autodiff)` pairs in `translator.vars()` order.
pub fn translator_differences(
    translator: &Translator,
    lm: &dyn LanguageModel,
    batch: &[PreparedExample],
    masks: &[DropoutMask],
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    let loss = compute_loss(translator, lm, batch, masks)?;
    let grads = loss.backward()?;
    let mut out = Vec::new();
    for (_, var) in translator.vars() {
        let base = flat(var.as_tensor())?;
        let auto = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; base.len()],
        };
        let shape = var.as_tensor().shape().clone();
        let dtype = var.dtype();
        for k in 0..base.len() {
            let mut probe = base.clone();
            probe[k] = base[k] + h;
            var.set(&Tensor::from_vec(probe.clone(), &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
            let up = loss_value(translator, lm, batch, masks)?;
            probe[k] = base[k] - h;
            var.set(&Tensor::from_vec(probe, &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
            let down = loss_value(translator, lm, batch, masks)?;
            out.push(((up - down) / (2.0 * h), auto[k]));
        }
        var.set(&Tensor::from_vec(base, &shape, &Device::Cpu)?.to_dtype(dtype)?)?;
    }
    Ok(out)
}

/// Runs the full check on `trainer`: differences on `batch` under `masks`,
/// then `updates` real training steps on `batch`.
pub fn check_gradient_isolation(
    trainer: &mut Trainer,
    batch: &[PreparedExample],
    masks: &[DropoutMask],
    threshold: f64,
    updates: usize,
) -> Result<GradientCheck> {
    let lm = trainer.language_model().clone();
    let pairs = translator_differences(trainer.translator(), lm.as_ref(), batch, masks, 1e-5)?;
    let translator_nonzero = pairs.iter().filter(|(fd, _)| fd.abs() > threshold).count();
    let max_autodiff_gap = pairs
        .iter()
        .map(|(fd, ad)| (fd - ad).abs() / fd.abs().max(1.0))
        .fold(0.0, f64::max);

    let frozen: Vec<(String, Tensor)> = trainer
        .backbone()
        .parameters()
        .iter()
        .chain(lm.parameters())
        .cloned()
        .collect();
    let loss = compute_loss(trainer.translator(), lm.as_ref(), batch, masks)?;
    let grads = loss.backward()?;
    let frozen_with_gradient = frozen
        .iter()
        .filter(|(_, t)| grads.get(t).is_some())
        .count();

    let before: Vec<Vec<f64>> = frozen.iter().map(|(_, t)| flat(t)).collect::<Result<_>>()?;
    let translator_before = trainer.translator().snapshot()?;
    let mut lr_sum = 0.0;
    for _ in 0..updates {
        lr_sum += trainer.train_step(batch)?.lr;
    }
    let lr = if lr_sum > 0.0 { lr_sum } else { 1.0 };
    let mut frozen_max_step_gradient: f64 = 0.0;
    for ((_, t), b) in frozen.iter().zip(&before) {
        for (x, y) in flat(t)?.iter().zip(b) {
            frozen_max_step_gradient = frozen_max_step_gradient.max((x - y).abs() / lr);
        }
    }
    let after: HashMap<String, Tensor> = trainer.translator().snapshot()?.into_iter().collect();
    let mut translator_min_tensor_step = f64::INFINITY;
    for (name, t) in &translator_before {
        let moved = flat(&after[name])?
            .iter()
            .zip(flat(t)?)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        translator_min_tensor_step = translator_min_tensor_step.min(moved / lr);
    }

    Ok(GradientCheck {
        translator_scalars: pairs.len(),
        translator_nonzero,
        max_autodiff_gap,
        frozen_scalars: before.iter().map(Vec::len).sum(),
        frozen_with_gradient,
        frozen_max_step_gradient,
        translator_min_tensor_step,
        updates,
    })
}

/// Central differences of the loss with respect to individual weights of a
/// decoder, obtained by rebuilding it with one weight moved. This is the
/// sensitivity of the loss to the frozen weights, which is not zero in general;
/// it is reported next to the isolation check for reference.
pub fn decoder_sensitivity(
    lm: &ToyDecoder,
    translator: &Translator,
    batch: &[PreparedExample],
    masks: &[DropoutMask],
    probes: &[(&str, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let weights: HashMap<String, Tensor> = lm.parameters().iter().cloned().collect();
    let rebuild = |name: &str, k: usize, delta: f64| -> Result<f64> {
        let mut w = weights.clone();
        let t = &weights[name];
        let mut v = flat(t)?;
        v[k] += delta;
        w.insert(
            name.to_string(),
            Tensor::from_vec(v, t.shape(), &Device::Cpu)?.to_dtype(t.dtype())?,
        );
        let mut store = FrozenStore::from_tensors(w, lm.dtype(), Device::Cpu);
        let moved = ToyDecoder::build(
            &mut store,
            lm.model_id(),
            DecoderConfig::clone(lm.config()),
            lm.tokenizer().clone(),
        )?;
        loss_value(translator, &moved, batch, masks)
    };
    probes
        .iter()
        .map(|&(name, k)| Ok((rebuild(name, k, h)? - rebuild(name, k, -h)?) / (2.0 * h)))
        .collect()
}
