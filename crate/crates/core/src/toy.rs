//! Small end-to-end stack on the colored-shapes corpus: a seeded conv
//! backbone, a decoder pretrained on captions alone, and translator runs
//! that finish in minutes on a CPU.

use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, LayerRef};
use crate::dropout::DropoutConfig;
use crate::error::Result;
use crate::explain::Explainer;
use crate::lm::{pretrain_decoder, DecoderConfig, LanguageModel, PretrainConfig, Tokenizer};
use crate::trainer::{
    shapes_examples, shapes_pretrain_samples, shapes_scenes, shapes_vocabulary, PreparedExample,
    Schedule, ShapeScene, Trainer,
};
use crate::translator::{Translator, TranslatorConfig};

pub const TOY_IMAGE_SIZE: usize = 32;

/// Feature dropout for toy runs. The last toy layer is a 4x4 grid, and a
/// higher rate than the 0.5 default shows the translator more small subsets.
pub const TOY_FEATURE_DROPOUT: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyStackConfig {
    pub decoder: DecoderConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_samples: usize,
}

impl Default for ToyStackConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::toy(),
            pretrain: PretrainConfig {
                steps: 400,
                batch_size: 32,
                lr: 3e-3,
                seed: 5,
                context_len: 4,
            },
            pretrain_samples: 4000,
        }
    }
}

pub struct ToyStack {
    pub backbone: Arc<Backbone>,
    pub lm: Arc<dyn LanguageModel>,
    /// Last pretraining batch loss of the decoder.
    pub lm_loss: f64,
}

impl ToyStack {
    pub fn build(cfg: &ToyStackConfig) -> Result<Self> {
        let backbone = Backbone::from_config(&BackboneConfig::toy(), None)?;
        let tokenizer = Tokenizer::new(shapes_vocabulary());
        let samples = shapes_pretrain_samples(&tokenizer, cfg.pretrain_samples, cfg.pretrain.seed);
        let (lm, lm_loss) = pretrain_decoder(
            &samples,
            tokenizer,
            "toy-decoder",
            cfg.decoder.clone(),
            &cfg.pretrain,
        )?;
        Ok(Self {
            backbone: Arc::new(backbone),
            lm: Arc::new(lm),
            lm_loss,
        })
    }

    pub fn last_layer(&self) -> LayerRef {
        self.backbone
            .spec()
            .layers
            .last()
            .expect("backbones have at least one layer")
            .layer
            .clone()
    }

    pub fn prepare(&self, scenes: &[ShapeScene]) -> Result<Vec<PreparedExample>> {
        crate::trainer::prepare_examples(
            &self.backbone,
            self.lm.as_ref(),
            &shapes_examples(scenes, TOY_IMAGE_SIZE),
        )
    }

    pub fn translator_config(&self) -> TranslatorConfig {
        TranslatorConfig::toy(self.backbone.spec(), self.lm.embed_dim())
    }

    /// Trains a fresh translator for `steps` updates.
    pub fn train(
        &self,
        data: &[PreparedExample],
        run: &ToyRun,
        dropout: DropoutConfig,
    ) -> Result<Translator> {
        let translator = Translator::new(self.translator_config(), run.seed, DType::F64)?;
        let mut trainer = Trainer::new(
            self.backbone.clone(),
            self.lm.clone(),
            translator,
            run.schedule.clone(),
            dropout,
            run.seed,
        )?;
        trainer.verify_every = 0;
        trainer.fit(data, run.steps, |r| {
            if r.step % 200 == 0 {
                log::info!("step {} loss {:.4}", r.step, r.loss);
            }
        })?;
        trainer.verify_frozen()?;
        trainer.snapshot_translator()
    }

    pub fn explainer(&self, translator: Translator) -> Result<Explainer> {
        Explainer::new(self.backbone.clone(), Arc::new(translator), self.lm.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for ToyRun {
    fn default() -> Self {
        let steps = 1500;
        Self {
            steps,
            seed: 11,
            schedule: Schedule {
                lr: 3e-3,
                weight_decay: 1e-6,
                min_lr: 1e-5,
                warmup_steps: 100,
                total_steps: steps,
                batch_size: 32,
                grad_clip: Some(1.0),
            },
        }
    }
}

/// Token dropout `p_token` with the toy feature dropout rate.
pub fn toy_dropout(p_token: f64, seed: u64) -> DropoutConfig {
    DropoutConfig {
        p_feature: TOY_FEATURE_DROPOUT,
        p_token,
        seed,
    }
}

pub fn train_scenes(count: usize) -> Vec<ShapeScene> {
    shapes_scenes(count, 101, 2)
}

pub fn held_out_scenes(count: usize) -> Vec<ShapeScene> {
    shapes_scenes(count, 202, 2)
}

/// Two-object scenes for localization checks.
pub fn two_concept_scenes(count: usize, seed: u64) -> Vec<ShapeScene> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| ShapeScene::random(&mut rng, 2))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub images: usize,
    /// Images where every concept's saliency peak falls in its own quadrant.
    pub localized: usize,
    pub concepts: usize,
    pub concepts_localized: usize,
}

impl Localization {
    pub fn rate(&self) -> f64 {
        self.localized as f64 / self.images.max(1) as f64
    }
}

/// For each scene, scores every object phrase at every cell of `layer` and
/// checks that the peak lies in that object's quadrant.
pub fn localization(
    explainer: &Explainer,
    scenes: &[ShapeScene],
    layer: &LayerRef,
) -> Result<Localization> {
    let mut out = Localization {
        images: scenes.len(),
        localized: 0,
        concepts: 0,
        concepts_localized: 0,
    };
    for scene in scenes {
        let maps = explainer.features(&scene.render(TOY_IMAGE_SIZE))?;
        let mut all = true;
        for o in &scene.objects {
            let s = explainer.saliency_in(&maps, layer, &o.phrase())?;
            let (i, j) = s.argmax();
            let hit =
                ShapeScene::quadrant_contains(o.quadrant, s.scores.height, s.scores.width, i, j);
            out.concepts += 1;
            out.concepts_localized += usize::from(hit);
            all &= hit;
        }
        out.localized += usize::from(all);
    }
    Ok(out)
}
