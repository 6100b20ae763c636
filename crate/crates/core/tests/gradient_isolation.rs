mod common;

use std::sync::Arc;

use featspeak::candle_core::DType;
use featspeak::dropout::{DropoutConfig, DropoutSampler};
use featspeak::lm::LanguageModel;
use featspeak::trainer::{check_gradient_isolation, decoder_sensitivity, Trainer};
use featspeak::translator::Translator;

use common::*;

#[test]
fn only_translator_weights_receive_gradient() {
    let backbone = tiny_backbone();
    let lm = Arc::new(tiny_decoder());
    let batch = shapes_data(&backbone, lm.as_ref(), 4, 7);
    let cfg = tiny_translator(&backbone, lm.as_ref());
    let translator = Translator::new(cfg, 1, DType::F64).unwrap();
    let dropout = DropoutConfig {
        p_feature: 0.5,
        p_token: 0.0,
        seed: 2,
    };
    let dims: Vec<_> = backbone.spec().layers.iter().map(|l| l.dims).collect();
    let mut sampler = DropoutSampler::new(dropout).unwrap();
    let masks: Vec<_> = batch
        .iter()
        .map(|_| sampler.sample(&dims).unwrap())
        .collect();
    let lm_dyn: Arc<dyn LanguageModel> = lm.clone();
    let mut trainer = Trainer::new(
        backbone,
        lm_dyn,
        translator,
        schedule(1e-2, 10, 4),
        dropout,
        3,
    )
    .unwrap();

    let r = check_gradient_isolation(&mut trainer, &batch, &masks, 1e-6, 3).unwrap();
    assert!(r.frozen_scalars > 0);
    assert_eq!(r.frozen_with_gradient, 0);
    assert_eq!(r.frozen_max_step_gradient, 0.0);
    assert!(r.translator_fraction() >= 0.95, "{r:?}");
    assert!(r.max_autodiff_gap < 1e-6, "{r:?}");
    assert!(r.translator_min_tensor_step > 0.0, "{r:?}");
    trainer.verify_frozen().unwrap();
}

#[test]
fn loss_depends_on_frozen_decoder_weights() {
    let backbone = tiny_backbone();
    let lm = tiny_decoder();
    let batch = shapes_data(&backbone, &lm, 4, 7);
    let translator = Translator::new(tiny_translator(&backbone, &lm), 1, DType::F64).unwrap();
    let dims: Vec<_> = backbone.spec().layers.iter().map(|l| l.dims).collect();
    let mut sampler = DropoutSampler::new(DropoutConfig::disabled()).unwrap();
    let masks: Vec<_> = batch
        .iter()
        .map(|_| sampler.sample(&dims).unwrap())
        .collect();
    let s = decoder_sensitivity(
        &lm,
        &translator,
        &batch,
        &masks,
        &[("wte", 40), ("ln_f.weight", 3)],
        1e-5,
    )
    .unwrap();
    assert!(s.iter().any(|g| g.abs() > 1e-6), "{s:?}");
}
