#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use featspeak::backbone::{Backbone, BackboneConfig};
use featspeak::candle_core::{DType, Device};
use featspeak::explain::Explainer;
use featspeak::lm::{DecoderConfig, LanguageModel, Tokenizer, ToyDecoder};
use featspeak::nn::FrozenStore;
use featspeak::trainer::shapes_vocabulary;
use featspeak::translator::{Translator, TranslatorConfig};
use featspeak_server::{router, AppState, Registry, ServerSettings};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn decoder_config() -> DecoderConfig {
    DecoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        ff_dim: 16,
        max_positions: 32,
        use_bos: true,
    }
}

pub fn small_lm() -> Arc<dyn LanguageModel> {
    let mut store = FrozenStore::seeded(9, DType::F64, Device::Cpu);
    Arc::new(
        ToyDecoder::build(
            &mut store,
            "small",
            decoder_config(),
            Tokenizer::new(shapes_vocabulary()),
        )
        .unwrap(),
    )
}

pub fn translator_config(backbone: &Backbone, lm: &dyn LanguageModel) -> TranslatorConfig {
    TranslatorConfig {
        n_prefix: 2,
        depth: 1,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        ..TranslatorConfig::toy(backbone.spec(), lm.embed_dim())
    }
}

/// Toy backbone, seeded decoder and random translator weights marked as
/// loaded, unless `trained` is false.
pub fn explainer(trained: bool) -> Explainer {
    let backbone = Arc::new(Backbone::from_config(&BackboneConfig::toy(), None).unwrap());
    let lm = small_lm();
    let t = Translator::new(translator_config(&backbone, lm.as_ref()), 5, DType::F64).unwrap();
    let t = if trained {
        let w = t.snapshot().unwrap().into_iter().collect();
        Translator::from_tensors(t.config().clone(), &w, DType::F64).unwrap()
    } else {
        t
    };
    Explainer::new(backbone, Arc::new(t), lm).unwrap()
}

pub fn app_with(models: Vec<(&str, Explainer)>, settings: ServerSettings) -> Router {
    let mut reg = Registry::default();
    for (id, ex) in models {
        reg.insert(id, ex);
    }
    router(Arc::new(AppState::new(reg, settings)))
}

pub fn app() -> Router {
    app_with(vec![("toy", explainer(true))], ServerSettings::default())
}

pub fn png(side: usize) -> Vec<u8> {
    let data = (0..side * side * 3)
        .map(|k| ((k * 7) % 97) as f32 / 96.0)
        .collect();
    featspeak::image::ImageInput::new(side, side, data)
        .unwrap()
        .encode_png()
        .unwrap()
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    send(
        app,
        Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
}

pub async fn upload(app: &Router, uri: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
    let (s, b) = send(app, Request::post(uri).body(Body::from(bytes)).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}
