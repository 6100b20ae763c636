mod common;

use std::sync::Arc;

use featspeak::candle_core::DType;
use featspeak::dropout::DropoutConfig;
use featspeak::eval::{run_ablation, AblationModel, Bleu, CaptionScorer, CiderD};
use featspeak::lm::{
    pretrain_decoder, DecoderConfig, LanguageModel, PretrainConfig, Tokenizer, ToyDecoder,
};
use featspeak::nn::FrozenStore;
use featspeak::trainer::{
    evaluate_loss, shapes_pretrain_samples, shapes_vocabulary, Checkpoint, LayerMode, Trainer,
};
use featspeak::translator::{Translator, TranslatorConfig};
use featspeak::Error;

use common::*;

fn small_decoder() -> Arc<dyn LanguageModel> {
    let cfg = DecoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        ff_dim: 32,
        max_positions: 16,
        use_bos: true,
    };
    let mut store = FrozenStore::seeded(21, DType::F64, featspeak::candle_core::Device::Cpu);
    Arc::new(
        ToyDecoder::build(
            &mut store,
            "small",
            cfg,
            Tokenizer::new(shapes_vocabulary()),
        )
        .unwrap(),
    )
}

fn small_translator(
    backbone: &featspeak::backbone::Backbone,
    lm: &dyn LanguageModel,
) -> TranslatorConfig {
    TranslatorConfig {
        n_prefix: 4,
        depth: 1,
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        ..TranslatorConfig::toy(backbone.spec(), lm.embed_dim())
    }
}

fn trainer(seed: u64, steps: usize) -> Trainer {
    let backbone = tiny_backbone();
    let lm = small_decoder();
    let t = Translator::new(small_translator(&backbone, lm.as_ref()), seed, DType::F64).unwrap();
    Trainer::new(
        backbone,
        lm,
        t,
        schedule(1e-2, steps, 8),
        DropoutConfig {
            seed,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

/// Decoder pretrained on captions alone, as in the toy stack but smaller.
fn pretrained_decoder() -> Arc<dyn LanguageModel> {
    let tok = Tokenizer::new(shapes_vocabulary());
    let pcfg = PretrainConfig {
        steps: 150,
        batch_size: 16,
        lr: 1e-2,
        seed: 3,
        context_len: 4,
    };
    let samples = shapes_pretrain_samples(&tok, 1000, 3);
    let cfg = DecoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        ff_dim: 32,
        max_positions: 16,
        use_bos: true,
    };
    Arc::new(
        pretrain_decoder(&samples, tok, "pretrained", cfg, &pcfg)
            .unwrap()
            .0,
    )
}

#[test]
fn translator_fits_a_small_corpus() {
    let backbone = tiny_backbone();
    let lm = pretrained_decoder();
    let t = Translator::new(small_translator(&backbone, lm.as_ref()), 1, DType::F64).unwrap();
    let mut tr = Trainer::new(
        backbone,
        lm,
        t,
        schedule(1e-2, 500, 8),
        DropoutConfig::disabled(),
        1,
    )
    .unwrap();
    let data = tr
        .prepare(&featspeak::trainer::shapes_examples(
            &featspeak::trainer::shapes_scenes(32, 5, 2),
            32,
        ))
        .unwrap();
    let before = tr.evaluate_loss(&data, &LayerMode::All).unwrap();
    tr.fit(&data, 500, |_| {}).unwrap();
    let after = tr.evaluate_loss(&data, &LayerMode::All).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    tr.verify_frozen().unwrap();
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let mut straight = trainer(4, 20);
    let data = shapes_data(
        straight.backbone(),
        straight.language_model().as_ref(),
        16,
        8,
    );
    let full = straight.fit(&data, 20, |_| {}).unwrap();

    let mut first = trainer(4, 20);
    first.fit(&data, 10, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    first.checkpoint().unwrap().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path, DType::F64).unwrap();
    let mut resumed = Trainer::resume(
        first.backbone().clone(),
        first.language_model().clone(),
        &ckpt,
    )
    .unwrap();
    assert_eq!(resumed.step(), 10);
    let rest = resumed.fit(&data, 10, |_| {}).unwrap();

    assert_eq!(&full[10..], &rest[..]);
    assert_eq!(
        straight.translator().digest().unwrap(),
        resumed.translator().digest().unwrap()
    );
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let mut tr = trainer(2, 5);
    let data = shapes_data(tr.backbone(), tr.language_model().as_ref(), 8, 3);
    tr.fit(&data, 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    tr.checkpoint().unwrap().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path, DType::F64).is_err());
}

#[test]
fn ablation_of_one_checkpoint_twice_agrees() {
    let mut tr = trainer(6, 30);
    let data = shapes_data(tr.backbone(), tr.language_model().as_ref(), 12, 9);
    tr.fit(&data, 30, |_| {}).unwrap();
    let ckpt = tr.checkpoint().unwrap();
    let spec = tr.backbone().spec();
    let models = vec![
        AblationModel::from_checkpoint("a", &ckpt, spec).unwrap(),
        AblationModel::from_checkpoint("b", &ckpt, spec).unwrap(),
    ];
    let refs: Vec<Vec<String>> = data.iter().map(|e| vec![e.caption.clone()]).collect();
    let modes = vec![
        LayerMode::All,
        LayerMode::Single(spec.layers[2].layer.clone()),
    ];
    let bleu = Bleu::default();
    let cider = CiderD::default();
    let scorers: Vec<&dyn CaptionScorer> = vec![&bleu, &cider];
    let lm = tr.language_model().clone();
    let reports = run_ablation(
        &models,
        lm.as_ref(),
        &data,
        &refs,
        &modes,
        &scorers,
        "shapes",
    )
    .unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(reports[0].values, reports[2].values);
    assert_eq!(reports[1].values, reports[3].values);
    assert_eq!(reports[1].setting, "single:stage3");
    let single = evaluate_loss(&models[0].translator, lm.as_ref(), &data, &modes[1]).unwrap();
    assert_eq!(reports[1].get("loss"), Some(single));

    assert!(matches!(
        run_ablation(
            &models[..1],
            lm.as_ref(),
            &data,
            &refs,
            &modes,
            &scorers,
            "shapes"
        ),
        Err(Error::Argument(_))
    ));
    let unknown = [LayerMode::Single("stage9".into())];
    assert!(matches!(
        run_ablation(
            &models,
            lm.as_ref(),
            &data,
            &refs,
            &unknown,
            &scorers,
            "shapes"
        ),
        Err(Error::Configuration(_))
    ));
}
