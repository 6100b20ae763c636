//! Optimisation of the translator against a frozen backbone and language model.

mod checkpoint;
mod data;
mod gradcheck;
mod loss;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneSpec, LayerDims};
use crate::dropout::{DropoutConfig, DropoutSampler};
use crate::error::{Error, Result};
use crate::lm::{load_language_model, LanguageModel, LmConfig};
use crate::translator::{Translator, TranslatorConfig};

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION};
pub use data::{
    load_tsv, shapes_examples, shapes_pretrain_samples, shapes_scenes, shapes_vocabulary,
    ShapeObject, ShapeScene, TrainingExample, COLORS, SHAPES,
};
pub use gradcheck::{
    check_gradient_isolation, decoder_sensitivity, translator_differences, GradientCheck,
};
pub use loss::{
    caption_targets, check_finite, compute_loss, features_loss, pooled_features, sequence_loss,
    LayerMode, PreparedExample,
};
pub use optim::AdamW;
pub use schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

struct FrozenDigests {
    backbone: String,
    lm: String,
}

pub struct Trainer {
    backbone: Arc<Backbone>,
    lm: Arc<dyn LanguageModel>,
    translator: Translator,
    optimizer: AdamW,
    schedule: Schedule,
    sampler: DropoutSampler,
    batch_rng: ChaCha8Rng,
    seed: u64,
    step: usize,
    dims: Vec<LayerDims>,
    frozen: FrozenDigests,
    /// Steps between frozen-weight digest checks; 0 checks only on demand.
    pub verify_every: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl Trainer {
    pub fn new(
        backbone: Arc<Backbone>,
        lm: Arc<dyn LanguageModel>,
        translator: Translator,
        schedule: Schedule,
        dropout: DropoutConfig,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        check_compatible(backbone.spec(), lm.as_ref(), translator.config())?;
        let optimizer = AdamW::new(translator.vars().to_vec(), schedule.weight_decay)?;
        let frozen = FrozenDigests {
            backbone: backbone.parameter_digest()?,
            lm: lm.parameter_digest()?,
        };
        let dims = backbone.spec().layers.iter().map(|l| l.dims).collect();
        Ok(Self {
            sampler: DropoutSampler::new(dropout)?,
            batch_rng: ChaCha8Rng::seed_from_u64(seed),
            backbone,
            lm,
            translator,
            optimizer,
            schedule,
            seed,
            step: 0,
            dims,
            frozen,
            verify_every: 100,
            metrics: BTreeMap::new(),
        })
    }

    /// Rebuilds the trainer state stored in `ckpt`.
    pub fn resume(
        backbone: Arc<Backbone>,
        lm: Arc<dyn LanguageModel>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.registry_hash != backbone.spec().registry_hash() {
            return Err(Error::integrity(
                "checkpoint was trained on a different explained-layer registry",
            ));
        }
        let translator = Translator::from_tensors(m.translator.clone(), &ckpt.weights, DType::F64)?;
        let mut t = Self::new(
            backbone,
            lm,
            translator,
            m.schedule.clone(),
            m.dropout,
            m.seed,
        )?;
        t.optimizer.restore(&ckpt.optimizer, m.step as u64)?;
        t.step = m.step;
        t.sampler
            .seek(checkpoint::parse_position(&m.sampler_position)?);
        t.batch_rng
            .set_word_pos(checkpoint::parse_position(&m.batch_position)?);
        t.metrics = m.metrics.clone();
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn translator(&self) -> &Translator {
        &self.translator
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn language_model(&self) -> &Arc<dyn LanguageModel> {
        &self.lm
    }

    /// An independent, trained copy of the current translator weights.
    pub fn snapshot_translator(&self) -> Result<Translator> {
        let weights = self.translator.snapshot()?.into_iter().collect();
        Translator::from_tensors(
            self.translator.config().clone(),
            &weights,
            self.translator.dtype(),
        )
    }

    /// Runs the backbone once per example and tokenizes captions.
    pub fn prepare(&self, examples: &[TrainingExample]) -> Result<Vec<PreparedExample>> {
        prepare_examples(&self.backbone, self.lm.as_ref(), examples)
    }

    /// Indices of a batch drawn uniformly with replacement.
    pub fn sample_indices(&mut self, len: usize) -> Vec<usize> {
        (0..self.schedule.batch_size)
            .map(|_| self.batch_rng.random_range(0..len))
            .collect()
    }

    pub fn train_step(&mut self, batch: &[PreparedExample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::argument("empty batch"));
        }
        let masks = batch
            .iter()
            .map(|_| self.sampler.sample(&self.dims))
            .collect::<Result<Vec<_>>>()?;
        let loss = compute_loss(&self.translator, self.lm.as_ref(), batch, &masks)?;
        let value = check_finite(&loss, self.step, batch)?;
        let grads = loss.backward()?;
        let lr = self.schedule.lr_at(self.step);
        let grad_norm = self.optimizer.step(&grads, lr, self.schedule.grad_clip)?;
        self.step += 1;
        if self.verify_every > 0 && self.step.is_multiple_of(self.verify_every) {
            self.verify_frozen()?;
        }
        self.translator.mark_trained();
        Ok(StepReport {
            step: self.step,
            loss: value,
            lr,
            grad_norm,
        })
    }

    /// `steps` updates on batches sampled from `data`.
    pub fn fit(
        &mut self,
        data: &[PreparedExample],
        steps: usize,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::argument("no training data"));
        }
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<PreparedExample> = self
                .sample_indices(data.len())
                .into_iter()
                .map(|i| data[i].clone())
                .collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Mean caption loss without dropout.
    pub fn evaluate_loss(&self, data: &[PreparedExample], mode: &LayerMode) -> Result<f64> {
        evaluate_loss(&self.translator, self.lm.as_ref(), data, mode)
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.backbone.parameter_digest()? != self.frozen.backbone {
            return Err(Error::FrozenMutation {
                component: format!("backbone `{}`", self.backbone.spec().model_id),
            });
        }
        if self.lm.parameter_digest()? != self.frozen.lm {
            return Err(Error::FrozenMutation {
                component: format!("language model `{}`", self.lm.model_id()),
            });
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            manifest: Manifest {
                translator: self.translator.config().clone(),
                schedule: self.schedule.clone(),
                dropout: *self.sampler.config(),
                step: self.step,
                sampler_position: self.sampler.position().to_string(),
                batch_position: self.batch_rng.get_word_pos().to_string(),
                seed: self.seed,
                registry_hash: self.backbone.spec().registry_hash(),
                lm_id: self.lm.model_id().to_string(),
                metrics: self.metrics.clone(),
                tensors: Vec::new(),
                blob_sha256: String::new(),
            },
            weights: self.translator.snapshot()?.into_iter().collect(),
            optimizer: self.optimizer.state().into_iter().collect(),
        })
    }
}

pub fn check_compatible(
    spec: &BackboneSpec,
    lm: &dyn LanguageModel,
    cfg: &TranslatorConfig,
) -> Result<()> {
    if cfg.lm_dim != lm.embed_dim() {
        return Err(Error::config(format!(
            "translator emits width {}, `{}` embeds at {}",
            cfg.lm_dim,
            lm.model_id(),
            lm.embed_dim()
        )));
    }
    for (slot, layer) in cfg.layers.iter().zip(&spec.layers) {
        if slot.layer != layer.layer || slot.channels != layer.dims.channels {
            return Err(Error::config(format!(
                "translator slot `{}` ({} channels) does not match backbone layer `{}` ({} channels)",
                slot.layer, slot.channels, layer.layer, layer.dims.channels
            )));
        }
    }
    if cfg.layers.len() != spec.layers.len() {
        return Err(Error::config(
            "translator and backbone disagree on the number of layers",
        ));
    }
    Ok(())
}

pub fn prepare_examples(
    backbone: &Backbone,
    lm: &dyn LanguageModel,
    examples: &[TrainingExample],
) -> Result<Vec<PreparedExample>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|e| e.image.clone()).collect();
        let maps = backbone.extract_batch(&images)?;
        for (e, maps) in chunk.iter().zip(maps) {
            out.push(PreparedExample {
                maps,
                caption: e.caption.clone(),
                targets: caption_targets(lm.tokenizer(), &e.caption)?,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_loss(
    translator: &Translator,
    lm: &dyn LanguageModel,
    data: &[PreparedExample],
    mode: &LayerMode,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::argument("no evaluation data"));
    }
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let features = chunk
            .iter()
            .map(|e| pooled_features(&e.maps, mode))
            .collect::<Result<Vec<_>>>()?;
        let loss = features_loss(translator, lm, &features, chunk)?.detach();
        total += check_finite(&loss, 0, chunk)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Translator hyperparameters; the input slots come from the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorSettings {
    pub n_prefix: usize,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for TranslatorSettings {
    fn default() -> Self {
        Self {
            n_prefix: 10,
            depth: 12,
            model_dim: 768,
            heads: 12,
            ff_dim: 3072,
        }
    }
}

impl TranslatorSettings {
    pub fn build(&self, spec: &BackboneSpec, lm_dim: usize) -> TranslatorConfig {
        TranslatorConfig {
            n_prefix: self.n_prefix,
            depth: self.depth,
            model_dim: self.model_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            ..TranslatorConfig::toy(spec, lm_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Shapes {
        count: usize,
        seed: u64,
        #[serde(default = "two")]
        max_objects: usize,
    },
    /// Local `image<TAB>caption` file.
    Tsv { path: PathBuf },
}

fn two() -> usize {
    2
}

/// Contents of a training config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub backbone: BackboneConfig,
    pub lm: LmConfig,
    #[serde(default)]
    pub translator: TranslatorSettings,
    #[serde(default)]
    pub dropout: DropoutConfig,
    #[serde(default)]
    pub schedule: Schedule,
    pub dataset: DatasetConfig,
    pub checkpoint_dir: PathBuf,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_every")]
    pub log_every: usize,
}

fn default_every() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Trains as described by the config at `path`, optionally resuming from a
/// checkpoint. Relative paths in the config resolve against its directory.
pub fn run_training(path: &Path, resume: Option<&Path>) -> Result<TrainingSummary> {
    let cfg: TrainingConfig = crate::config::read_toml(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cache = crate::config::model_cache_dir(Some(&base));
    let backbone = Arc::new(Backbone::from_config(&cfg.backbone, cache.as_deref())?);
    let lm = load_language_model(&cfg.lm, cache.as_deref())?;
    let spec = backbone.spec().clone();
    let examples = match &cfg.dataset {
        DatasetConfig::Shapes {
            count,
            seed,
            max_objects,
        } => {
            if spec.input_size.0 != spec.input_size.1 {
                return Err(Error::config("shapes scenes need a square input size"));
            }
            shapes_examples(
                &shapes_scenes(*count, *seed, *max_objects),
                spec.input_size.0,
            )
        }
        DatasetConfig::Tsv { path } => load_tsv(&resolve(&base, path), spec.input_size)?,
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(backbone, lm, &Checkpoint::load(p, DType::F64)?)?,
        None => {
            let tcfg = cfg.translator.build(&spec, lm.embed_dim());
            let translator = Translator::new(tcfg, cfg.seed, DType::F64)?;
            Trainer::new(
                backbone,
                lm,
                translator,
                cfg.schedule.clone(),
                cfg.dropout,
                cfg.seed,
            )?
        }
    };
    let data = trainer.prepare(&examples)?;
    let dir = resolve(&base, &cfg.checkpoint_dir);
    std::fs::create_dir_all(&dir)?;
    let mut last = f64::NAN;
    let mut latest = dir.join("latest.ckpt");
    while trainer.step() < cfg.steps {
        let chunk = cfg.checkpoint_every.max(1).min(cfg.steps - trainer.step());
        let log_every = cfg.log_every.max(1);
        let reports = trainer.fit(&data, chunk, |r| {
            if r.step % log_every == 0 {
                log::info!(
                    "step {} loss {:.4} lr {:.2e} |g| {:.3}",
                    r.step,
                    r.loss,
                    r.lr,
                    r.grad_norm
                );
            }
        })?;
        last = reports.last().map_or(last, |r| r.loss);
        trainer.metrics.insert("train_loss".into(), last);
        latest = dir.join(format!("step-{:07}.ckpt", trainer.step()));
        trainer.checkpoint()?.save(&latest)?;
        std::fs::copy(&latest, dir.join("latest.ckpt"))?;
    }
    trainer.verify_frozen()?;
    Ok(TrainingSummary {
        steps: trainer.step(),
        final_loss: last,
        checkpoint: latest,
    })
}
