#![allow(dead_code)]

use std::sync::Arc;

use featspeak::backbone::{Architecture, Backbone, BackboneConfig};
use featspeak::candle_core::{DType, Device};
use featspeak::lm::{DecoderConfig, LanguageModel, Tokenizer, ToyDecoder};
use featspeak::nn::FrozenStore;
use featspeak::trainer::{
    prepare_examples, shapes_examples, shapes_scenes, shapes_vocabulary, PreparedExample, Schedule,
};
use featspeak::translator::TranslatorConfig;

/// Toy conv backbone with four channels per stage.
pub fn tiny_backbone() -> Arc<Backbone> {
    let mut cfg = BackboneConfig::toy();
    cfg.architecture = Architecture::ToyConv {
        channels: vec![4, 4, 4],
    };
    Arc::new(Backbone::from_config(&cfg, None).unwrap())
}

pub fn tiny_decoder() -> ToyDecoder {
    let cfg = DecoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        ff_dim: 16,
        max_positions: 16,
        use_bos: true,
    };
    let mut store = FrozenStore::seeded(9, DType::F64, Device::Cpu);
    ToyDecoder::build(
        &mut store,
        "tiny-decoder",
        cfg,
        Tokenizer::new(shapes_vocabulary()),
    )
    .unwrap()
}

pub fn tiny_translator(backbone: &Backbone, lm: &dyn LanguageModel) -> TranslatorConfig {
    TranslatorConfig {
        n_prefix: 2,
        depth: 1,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        ..TranslatorConfig::toy(backbone.spec(), lm.embed_dim())
    }
}

pub fn shapes_data(
    backbone: &Backbone,
    lm: &dyn LanguageModel,
    count: usize,
    seed: u64,
) -> Vec<PreparedExample> {
    let scenes = shapes_scenes(count, seed, 2);
    prepare_examples(backbone, lm, &shapes_examples(&scenes, 32)).unwrap()
}

pub fn schedule(lr: f64, steps: usize, batch_size: usize) -> Schedule {
    Schedule {
        lr,
        weight_decay: 1e-6,
        min_lr: lr / 10.0,
        warmup_steps: 0,
        total_steps: steps,
        batch_size,
        grad_clip: Some(1.0),
    }
}
