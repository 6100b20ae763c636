mod common;

use axum::http::StatusCode;
use base64::Engine;
use featspeak_server::ServerSettings;
use serde_json::json;

use common::*;

async fn session(app: &axum::Router) -> String {
    let (s, v) = upload(app, "/sessions?model=toy", png(48)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(
        (v["height"].as_u64(), v["width"].as_u64()),
        (Some(32), Some(32))
    );
    v["session"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn lists_models_and_layers() {
    let app = app();
    let (s, v) = get(&app, "/models").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["id"], "toy");
    assert_eq!(v[0]["backbone"], "toy-conv");
    assert_eq!(v[0]["layers"].as_array().unwrap().len(), 3);

    let (s, v) = get(&app, "/models/toy/layers").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        v[2],
        json!({"name": "stage3", "height": 4, "width": 4, "channels": 64})
    );
    assert_eq!(
        get(&app, "/models/other/layers").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(get(&app, "/health").await.0, StatusCode::OK);
}

#[tokio::test]
async fn upload_validation() {
    let settings = ServerSettings {
        max_upload_bytes: 4096,
        ..Default::default()
    };
    let app = app_with(vec![("toy", explainer(true))], settings);
    assert_eq!(
        upload(&app, "/sessions?model=toy", vec![]).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        upload(&app, "/sessions?model=toy", b"not an image".to_vec())
            .await
            .0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        upload(&app, "/sessions?model=toy", vec![7; 5000]).await.0,
        StatusCode::PAYLOAD_TOO_LARGE
    );
    assert_eq!(
        upload(&app, "/sessions?model=nope", png(8)).await.0,
        StatusCode::NOT_FOUND
    );
    let (s, v) = upload(&app, "/sessions", png(8)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["model"], "toy");
}

#[tokio::test]
async fn describe_location_layer_and_image() {
    let app = app();
    let id = session(&app).await;
    let (s, b) = post_json(
        &app,
        "/describe",
        json!({"session": id, "layer": "stage2", "i": 7, "j": 0, "max_tokens": 4}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&b);
    assert_eq!(v["provenance"], json!({"kind": "location", "i": 7, "j": 0}));
    let n = v["token_ids"].as_array().unwrap().len();
    assert!(n <= 4);
    assert_eq!(v["tokens"].as_array().unwrap().len(), n);
    assert_eq!(v["logprobs"].as_array().unwrap().len(), n);

    let (s, b) = post_json(
        &app,
        "/describe",
        json!({"session": id, "layer": "stage3", "pooled": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    assert_eq!(json(&b)["provenance"]["kind"], "pooled");
    let (s, b) = post_json(
        &app,
        "/describe",
        json!({"session": id, "layer": "all", "pooled": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    assert_eq!(json(&b)["layer"], "all", "{}", String::from_utf8_lossy(&b));
}

#[tokio::test]
async fn describe_errors() {
    let app = app();
    let id = session(&app).await;
    let cases = [
        (
            json!({"session": id, "layer": "stage2"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"session": id, "layer": "stage2", "i": 8, "j": 0}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"session": id, "layer": "stage9", "i": 0, "j": 0}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"session": id, "layer": "stage1", "i": 0, "j": 0, "max_tokens": 0}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"session": "zzz", "layer": "stage1", "pooled": true}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"session": uuid::Uuid::new_v4().to_string(), "layer": "stage1", "pooled": true}),
            StatusCode::NOT_FOUND,
        ),
    ];
    for (body, want) in cases {
        let (s, b) = post_json(&app, "/describe", body.clone()).await;
        assert_eq!(s, want, "{body}");
        assert!(json(&b)["error"].is_string());
    }
}

#[tokio::test]
async fn saliency_grid_and_heatmap() {
    let app = app();
    let id = session(&app).await;
    let req = json!({"session": id, "layer": "stage2", "query": "red circle"});
    let (s, first) = post_json(&app, "/saliency", req.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&first);
    assert_eq!(
        (v["height"].as_u64(), v["width"].as_u64()),
        (Some(8), Some(8))
    );
    let rows = v["scores"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 8));
    assert!(v["raw_min"].as_f64().unwrap() <= v["raw_max"].as_f64().unwrap());
    assert_eq!(
        (
            v["heatmap"]["height"].as_u64(),
            v["heatmap"]["width"].as_u64()
        ),
        (Some(32), Some(32))
    );
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(v["heatmap"]["data"].as_str().unwrap())
        .unwrap();
    assert_eq!(&bytes[1..4], b"PNG");

    let (_, again) = post_json(&app, "/saliency", req).await;
    assert_eq!(first, again);

    let (s, _) = post_json(
        &app,
        "/saliency",
        json!({"session": id, "layer": "stage2", "query": " "}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(
        &app,
        "/saliency",
        json!({"session": id, "layer": "stage2", "query": "red", "style": "jet"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn untrained_translator_is_a_conflict() {
    let app = app_with(vec![("raw", explainer(false))], ServerSettings::default());
    let (_, v) = upload(&app, "/sessions?model=raw", png(32)).await;
    let id = v["session"].as_str().unwrap();
    let (s, _) = post_json(
        &app,
        "/describe",
        json!({"session": id, "layer": "stage1", "pooled": true}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn expired_sessions_are_gone() {
    let settings = ServerSettings {
        session_ttl_secs: 0,
        ..Default::default()
    };
    let app = app_with(vec![("toy", explainer(true))], settings);
    let (_, v) = upload(&app, "/sessions", png(32)).await;
    tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    let (s, _) = post_json(
        &app,
        "/describe",
        json!({"session": v["session"], "layer": "stage1", "pooled": true}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_requests_share_one_session() {
    let app = app();
    let id = session(&app).await;
    let req = json!({"session": id, "layer": "stage3", "query": "blue square"});
    let runs = (0..4).map(|_| {
        let app = app.clone();
        let req = req.clone();
        tokio::spawn(async move { post_json(&app, "/saliency", req).await })
    });
    let mut bodies = Vec::new();
    for r in runs {
        let (s, b) = r.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        bodies.push(b);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
