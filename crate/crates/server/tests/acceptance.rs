//! Acceptance gate. Runs each criterion, prints one `[PASS]` or `[FAIL]` line
//! per criterion and exits non-zero if any failed.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use featspeak::backbone::{
    pool_features, select_location, Architecture, Backbone, BackboneConfig, KeepGrid, LayerDims,
    LayerRef, SpatialFeatureMap,
};
use featspeak::candle_core::{DType, Device};
use featspeak::dropout::{DropoutConfig, DropoutSampler};
use featspeak::eval::{
    curve_with_order, generate_captions, CaptionScorer, CiderD, CurveConfig, CurveKind,
};
use featspeak::explain::Explainer;
use featspeak::image::ImageInput;
use featspeak::lm::{
    generate, next_token_log_probs, score_query, DecoderConfig, GenerationConfig, LanguageModel,
    StubLm, Tokenizer, ToyDecoder,
};
use featspeak::nn::FrozenStore;
use featspeak::toy::{
    held_out_scenes, localization, toy_dropout, train_scenes, two_concept_scenes, ToyRun, ToyStack,
    ToyStackConfig,
};
use featspeak::trainer::{
    check_gradient_isolation, decoder_sensitivity, evaluate_loss, prepare_examples,
    shapes_examples, shapes_scenes, shapes_vocabulary, LayerMode, Schedule, Trainer,
};
use featspeak::translator::{PrefixPrompt, Translator, TranslatorConfig};
use featspeak_server::ServerSettings;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<(bool, String), String>;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: usize, name: &'static str, budget: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (pass, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let pass = if elapsed > budget {
        detail.push_str(&format!("; over the {}s budget", budget.as_secs()));
        false
    } else {
        pass
    };
    let o = Outcome {
        id,
        name,
        pass,
        detail,
        elapsed,
    };
    println!(
        "[{}] {}. {}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed.as_secs_f64()
    );
    o
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn gradient_isolation() -> Check {
    let mut cfg = BackboneConfig::toy();
    cfg.architecture = Architecture::ToyConv {
        channels: vec![4, 4, 4],
    };
    let backbone = Arc::new(Backbone::from_config(&cfg, None).map_err(e)?);
    let dcfg = DecoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        ff_dim: 16,
        max_positions: 16,
        use_bos: true,
    };
    let mut store = FrozenStore::seeded(9, DType::F64, Device::Cpu);
    let decoder = Arc::new(
        ToyDecoder::build(
            &mut store,
            "tiny",
            dcfg,
            Tokenizer::new(shapes_vocabulary()),
        )
        .map_err(e)?,
    );
    let lm: Arc<dyn LanguageModel> = decoder.clone();
    let batch = prepare_examples(
        &backbone,
        lm.as_ref(),
        &shapes_examples(&shapes_scenes(4, 7, 2), 32),
    )
    .map_err(e)?;
    let tcfg = TranslatorConfig {
        n_prefix: 2,
        depth: 1,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        ..TranslatorConfig::toy(backbone.spec(), lm.embed_dim())
    };
    let translator = Translator::new(tcfg, 1, DType::F64).map_err(e)?;
    let dropout = DropoutConfig {
        p_feature: 0.5,
        p_token: 0.0,
        seed: 2,
    };
    let dims: Vec<LayerDims> = backbone.spec().layers.iter().map(|l| l.dims).collect();
    let mut sampler = DropoutSampler::new(dropout).map_err(e)?;
    let masks = batch
        .iter()
        .map(|_| sampler.sample(&dims))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let schedule = Schedule {
        lr: 1e-2,
        min_lr: 1e-3,
        warmup_steps: 0,
        total_steps: 10,
        batch_size: 4,
        ..Default::default()
    };
    let mut trainer = Trainer::new(backbone, lm, translator, schedule, dropout, 3).map_err(e)?;
    let sensitivity = decoder_sensitivity(
        &decoder,
        trainer.translator(),
        &batch,
        &masks,
        &[("wte", 40), ("h.0.mlp.fc1.weight", 5), ("ln_f.weight", 3)],
        1e-5,
    )
    .map_err(e)?;
    let r = check_gradient_isolation(&mut trainer, &batch, &masks, 1e-6, 3).map_err(e)?;
    trainer.verify_frozen().map_err(e)?;
    let pass = r.frozen_with_gradient == 0
        && r.frozen_max_step_gradient < 1e-6
        && r.translator_fraction() >= 0.95
        && r.max_autodiff_gap < 1e-6;
    let max_sens = sensitivity.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok((
        pass,
        format!(
            "frozen scalars {} with autodiff gradient in {} tensors, max |update|/lr {:.1e}; \
             translator {}/{} ({:.1}%) finite differences above 1e-6, max gap to autodiff {:.1e}; \
             loss sensitivity to frozen decoder weights (not routed to them) {:.1e}",
            r.frozen_scalars,
            r.frozen_with_gradient,
            r.frozen_max_step_gradient,
            r.translator_nonzero,
            r.translator_scalars,
            100.0 * r.translator_fraction(),
            r.max_autodiff_gap,
            max_sens
        ),
    ))
}

/// Keep probability of one of `n` positions dropped with `p`, conditioned on
/// at least one surviving, by summing over all patterns.
fn enumerated_keep_rate(n: usize, p: f64) -> f64 {
    let (mut all, mut kept) = (0.0, 0.0);
    for pattern in 1u32..(1 << n) {
        let k = pattern.count_ones() as i32;
        let w = (1.0 - p).powi(k) * p.powi(n as i32 - k);
        all += w;
        if pattern & 1 == 1 {
            kept += w;
        }
    }
    kept / all
}

fn dropout_law() -> Check {
    let oracle = enumerated_keep_rate(3, 0.5);
    let dims = [LayerDims {
        height: 2,
        width: 2,
        channels: 1,
    }; 3];
    let cfg = DropoutConfig {
        p_feature: 0.5,
        p_token: 0.5,
        seed: 12345,
    };
    let mut a = DropoutSampler::new(cfg).map_err(e)?;
    let mut b = DropoutSampler::new(cfg).map_err(e)?;
    let draws = 100_000;
    let mut kept = [0usize; 3];
    let mut violations = 0;
    let mut divergent = 0;
    for _ in 0..draws {
        let m = a.sample(&dims).map_err(e)?;
        violations += usize::from(!m.is_admissible());
        divergent += usize::from(m != b.sample(&dims).map_err(e)?);
        for (c, &k) in kept.iter_mut().zip(&m.layer_keep) {
            *c += usize::from(k);
        }
    }
    let rates: Vec<f64> = kept.iter().map(|&c| c as f64 / draws as f64).collect();
    let worst = rates.iter().map(|r| (r - oracle).abs()).fold(0.0, f64::max);
    Ok((
        worst <= 0.01 && violations == 0 && divergent == 0 && (oracle - 4.0 / 7.0).abs() < 1e-12,
        format!(
            "keep rates {:.4}/{:.4}/{:.4} vs enumerated {oracle:.4}, {violations} inadmissible, \
             {divergent} differences between same-seed streams",
            rates[0], rates[1], rates[2]
        ),
    ))
}

fn pooling_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut selection_mismatch = 0;
    for _ in 0..1000 {
        let (h, w, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let values: Vec<f64> = (0..h * w * c)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let map = SpatialFeatureMap::new(LayerRef::new("l"), h, w, c, values.clone()).map_err(e)?;
        let mut keep: Vec<bool> = (0..h * w).map(|_| rng.random::<bool>()).collect();
        if !keep.contains(&true) {
            keep[0] = true;
        }
        let pooled = pool_features(
            &map,
            Some(&KeepGrid {
                height: h,
                width: w,
                keep: keep.clone(),
            }),
        )
        .map_err(e)?;
        let n = keep.iter().filter(|&&k| k).count() as f64;
        for ch in 0..c {
            let s: f64 = (0..h * w)
                .filter(|&cell| keep[cell])
                .map(|cell| values[cell * c + ch])
                .sum();
            let want = s / n;
            worst = worst.max((pooled.values[ch] - want).abs() / want.abs().max(1.0));
        }
        let (i, j) = (rng.random_range(0..h), rng.random_range(0..w));
        let one = pool_features(&map, Some(&KeepGrid::only(h, w, i, j))).map_err(e)?;
        if one.values != select_location(&map, i, j).map_err(e)?.values {
            selection_mismatch += 1;
        }
    }
    Ok((
        worst <= 1e-6 && selection_mismatch == 0,
        format!("1000 cases, worst relative error {worst:.1e}, {selection_mismatch} mask-of-one mismatches"),
    ))
}

fn scoring_algebra() -> Check {
    let tok = Tokenizer::new(shapes_vocabulary());
    let v = tok.vocab_size();
    let history = StubLm::from_fn(tok.clone(), 4, move |view| {
        let h: u32 = view
            .history
            .iter()
            .enumerate()
            .map(|(k, &t)| (k as u32 + 1) * t)
            .sum();
        (0..v)
            .map(|t| ((t as u32 * 5 + h) % 7) as f64 * 0.4 + view.prompt[t % view.prompt.len()])
            .collect()
    })
    .with_bos(true);
    let prompt =
        PrefixPrompt::new(2, 4, (0..8).map(|k| k as f64 * 0.1 - 0.3).collect()).map_err(e)?;
    let mut chain_ok = true;
    for q in ["red", "green triangle", "blue circle and yellow cross"] {
        let ids = tok.encode(q);
        let s = score_query(&history, &prompt, q).map_err(e)?;
        let stepwise = (0..ids.len())
            .map(|k| Ok(next_token_log_probs(&history, &prompt, &ids[..k])?[ids[k] as usize]))
            .collect::<featspeak::Result<Vec<f64>>>()
            .map_err(e)?;
        chain_ok &= s.token_log_probs == stepwise && s.total == stepwise.iter().sum::<f64>();
    }

    let uniform = StubLm::uniform(tok.clone(), 4);
    let mut uniform_gap: f64 = 0.0;
    for q in ["red", "red square", "red square and blue circle"] {
        let m = tok.encode(q).len() as f64;
        let s = score_query(&uniform, &prompt, q).map_err(e)?;
        uniform_gap = uniform_gap.max((s.total - m * (1.0 / v as f64).ln()).abs());
    }

    let dcfg = DecoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        ff_dim: 16,
        max_positions: 24,
        use_bos: true,
    };
    let mut store = FrozenStore::seeded(3, DType::F64, Device::Cpu);
    let decoder = ToyDecoder::build(&mut store, "tiny", dcfg, tok).map_err(e)?;
    let p8 =
        PrefixPrompt::new(2, 8, (0..16).map(|k| (k as f64 * 0.7).sin()).collect()).map_err(e)?;
    let cfg = GenerationConfig { max_tokens: 10 };
    let first = generate(&decoder, &p8, &cfg).map_err(e)?;
    let mut same = 0;
    for _ in 0..100 {
        same += usize::from(generate(&decoder, &p8, &cfg).map_err(e)? == first);
    }
    Ok((
        chain_ok && uniform_gap < 1e-9 && same == 100,
        format!(
            "chain rule exact: {chain_ok}; uniform gap {uniform_gap:.1e}; greedy identical {same}/100"
        ),
    ))
}

fn deletion_analytics() -> Check {
    let side = 10;
    let data: Vec<f32> = (0..side * side)
        .flat_map(|k| {
            let v = if (k / side + k % side) % 2 == 0 {
                0.1
            } else {
                0.9
            };
            [v, 1.0 - v, v]
        })
        .collect();
    let img = ImageInput::new(side, side, data).map_err(e)?;
    let cfg = CurveConfig {
        steps: 20,
        fill: [0.5; 3],
        blur_sigma: 1.0,
    };
    let n = side * side;
    let order: Vec<usize> = (0..n).map(|k| (k * 37) % n).collect();

    let mut const_gap: f64 = 0.0;
    for c in [0.0, 0.3, 0.7, 1.0] {
        for kind in [CurveKind::Deletion, CurveKind::Insertion] {
            let curve =
                curve_with_order(kind, &img, &order, &mut |_: &ImageInput| Ok(c), &cfg, false)
                    .map_err(e)?;
            const_gap = const_gap.max((curve.auc - c).abs());
        }
    }

    let weighted = |weights: Vec<f64>| {
        let original = img.clone();
        let total: f64 = weights.iter().sum();
        move |x: &ImageInput| -> featspeak::Result<f64> {
            let intact: f64 = (0..n)
                .filter(|&p| x.pixel(p / side, p % side) == original.pixel(p / side, p % side))
                .map(|p| weights[p])
                .sum();
            Ok((intact / total).clamp(0.0, 1.0))
        }
    };
    let mut linear_gap: f64 = 0.0;
    for kind in [CurveKind::Deletion, CurveKind::Insertion] {
        let curve = curve_with_order(kind, &img, &order, &mut weighted(vec![1.0; n]), &cfg, false)
            .map_err(e)?;
        linear_gap = linear_gap.max((curve.auc - 0.5).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut wins = 0;
    for _ in 0..100 {
        let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let mut truth: Vec<usize> = (0..n).collect();
        truth.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
        let reversed: Vec<usize> = truth.iter().rev().copied().collect();
        let mut clf = weighted(weights);
        let good = curve_with_order(CurveKind::Deletion, &img, &truth, &mut clf, &cfg, false)
            .map_err(e)?;
        let bad = curve_with_order(CurveKind::Deletion, &img, &reversed, &mut clf, &cfg, false)
            .map_err(e)?;
        wins += usize::from(good.auc < bad.auc);
    }
    Ok((
        const_gap < 1e-9 && linear_gap < 1e-9 && wins == 100,
        format!(
            "constant gap {const_gap:.1e}, linear gap {linear_gap:.1e}, \
             ground truth beats reversed {wins}/100"
        ),
    ))
}

struct ToyResult {
    stack: ToyStack,
    explainer: Explainer,
}

fn toy_end_to_end(slot: &mut Option<ToyResult>) -> Check {
    let stack = ToyStack::build(&ToyStackConfig::default()).map_err(e)?;
    let train = stack.prepare(&train_scenes(2000)).map_err(e)?;
    let scenes = held_out_scenes(200);
    let eval = stack.prepare(&scenes).map_err(e)?;
    let refs: Vec<Vec<String>> = scenes.iter().map(|s| vec![s.caption()]).collect();
    let single = LayerMode::Single(stack.last_layer());
    let run = ToyRun::default();
    let cider = CiderD::default();
    let mut rows = Vec::new();
    let mut with_dropout = None;
    for p_token in [0.5, 0.0] {
        let t = stack
            .train(&train, &run, toy_dropout(p_token, 3))
            .map_err(e)?;
        let loss = evaluate_loss(&t, stack.lm.as_ref(), &eval, &single).map_err(e)?;
        let hyps = generate_captions(
            &t,
            stack.lm.as_ref(),
            &eval,
            &single,
            &GenerationConfig::CAPTION,
        )
        .map_err(e)?;
        let score = cider.score(&hyps, &refs).map_err(e)?;
        rows.push((p_token, loss, score));
        if p_token > 0.0 {
            with_dropout = Some(t);
        }
    }
    let (_, loss_d, cider_d) = rows[0];
    let (_, loss_n, cider_n) = rows[1];
    let explainer = stack
        .explainer(with_dropout.expect("trained above"))
        .map_err(e)?;
    *slot = Some(ToyResult { stack, explainer });
    Ok((
        loss_d < loss_n && cider_d > cider_n,
        format!(
            "single-layer loss {loss_d:.4} with token dropout vs {loss_n:.4} without; \
             CIDEr-D {cider_d:.1} vs {cider_n:.1}"
        ),
    ))
}

fn toy_localization(toy: Option<&ToyResult>) -> Check {
    let toy = toy.ok_or("criterion 6 produced no trained model")?;
    let loc = localization(
        &toy.explainer,
        &two_concept_scenes(50, 303),
        &toy.stack.last_layer(),
    )
    .map_err(e)?;
    Ok((
        loc.rate() >= 0.8,
        format!(
            "{}/{} images with every concept peak in its quadrant ({:.0}%), {}/{} concepts",
            loc.localized,
            loc.images,
            100.0 * loc.rate(),
            loc.concepts_localized,
            loc.concepts
        ),
    ))
}

async fn round_trip(
    app: &axum::Router,
    image: Vec<u8>,
) -> Result<(Vec<u8>, Vec<u8>, Value), String> {
    let (s, created) = common::upload(app, "/sessions?model=toy", image).await;
    if s != StatusCode::CREATED {
        return Err(format!("create_session returned {s}: {created}"));
    }
    let id = created["session"].clone();
    let (s, layers) = common::get(app, "/models/toy/layers").await;
    if s != StatusCode::OK {
        return Err(format!("layers returned {s}"));
    }
    let last = layers
        .as_array()
        .and_then(|l| l.last())
        .cloned()
        .ok_or("no layers")?;
    let (s, describe) = common::post_json(
        app,
        "/describe",
        json!({"session": id, "layer": last["name"], "i": 0, "j": 1}),
    )
    .await;
    if s != StatusCode::OK {
        return Err(format!("describe returned {s}"));
    }
    let (s, saliency) = common::post_json(
        app,
        "/saliency",
        json!({"session": id, "layer": last["name"], "query": "red square"}),
    )
    .await;
    if s != StatusCode::OK {
        return Err(format!("saliency returned {s}"));
    }
    Ok((describe, saliency, last))
}

fn service_contract(toy: Option<ToyResult>) -> Check {
    let explainer = match toy {
        Some(t) => t.explainer,
        None => common::explainer(true),
    };
    let (ih, iw) = explainer.backbone().spec().input_size;
    let app = common::app_with(vec![("toy", explainer)], ServerSettings::default());
    let rt = tokio::runtime::Runtime::new().map_err(e)?;
    rt.block_on(async {
        let image = common::png(40);
        let (d1, s1, last) = round_trip(&app, image.clone()).await?;
        let (d2, s2, _) = round_trip(&app, image).await?;
        let v: Value = serde_json::from_slice(&s1).map_err(e)?;
        let grid = (
            v["scores"].as_array().map_or(0, Vec::len),
            v["scores"][0].as_array().map_or(0, Vec::len),
        );
        let want_grid = (
            last["height"].as_u64().unwrap_or(0) as usize,
            last["width"].as_u64().unwrap_or(0) as usize,
        );
        let heat = (
            v["heatmap"]["height"].as_u64().unwrap_or(0) as usize,
            v["heatmap"]["width"].as_u64().unwrap_or(0) as usize,
        );
        let identical = d1 == d2 && s1 == s2;
        let text = serde_json::from_slice::<Value>(&d1).map_err(e)?["text"].clone();
        Ok((
            grid == want_grid && heat == (ih, iw) && identical,
            format!(
                "grid {}x{} (layer {}x{}), heatmap {}x{} (input {ih}x{iw}), \
                 repeat byte-identical: {identical}, description {text}",
                grid.0, grid.1, want_grid.0, want_grid.1, heat.0, heat.1
            ),
        ))
    })
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let start = Instant::now();
    let mut outcomes = vec![
        run(
            1,
            "gradient isolation",
            Duration::from_secs(120),
            gradient_isolation,
        ),
        run(2, "dropout law", Duration::from_secs(30), dropout_law),
        run(
            3,
            "masked pooling oracle",
            Duration::from_secs(30),
            pooling_oracle,
        ),
        run(
            4,
            "scoring algebra",
            Duration::from_secs(30),
            scoring_algebra,
        ),
        run(
            5,
            "deletion and insertion analytics",
            Duration::from_secs(60),
            deletion_analytics,
        ),
    ];
    let mut toy = None;
    outcomes.push(run(
        6,
        "toy end-to-end token dropout ablation",
        Duration::from_secs(20 * 60),
        || toy_end_to_end(&mut toy),
    ));
    outcomes.push(run(
        7,
        "toy saliency localization",
        Duration::from_secs(5 * 60),
        || toy_localization(toy.as_ref()),
    ));
    outcomes.push(run(8, "service contract", Duration::from_secs(60), || {
        service_contract(toy)
    }));
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != outcomes.len() {
        std::process::exit(1);
    }
}
