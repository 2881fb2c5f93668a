use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use slider_forge::config::AppConfig;
use slider_forge::engine::SliderEngine;
use slider_forge::service::{router, GenerateResponse};
use slider_forge::trainer::train_slider;

fn engine() -> Arc<SliderEngine> {
    static ENGINE: OnceLock<Arc<SliderEngine>> = OnceLock::new();
    ENGINE
        .get_or_init(|| {
            let cfg = AppConfig::from_toml_str("[training]\nsteps = 60\n").unwrap();
            let mut engine = SliderEngine::new(&cfg).unwrap();
            engine.add_checkpoint(train_slider(&cfg).unwrap()).unwrap();
            Arc::new(engine)
        })
        .clone()
}

async fn call(req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(engine()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(path: &str) -> (StatusCode, Value) {
    call(Request::get(path).body(Body::empty()).unwrap()).await
}

async fn post(body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/generate")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(req).await
}

#[tokio::test]
async fn health_and_catalog() {
    let (status, body) = get("/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");

    let (status, body) = get("/api/sliders").await;
    assert_eq!(status, StatusCode::OK);
    let list = body.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["name"], "brightness");
    assert_eq!(list[0]["concept"]["positive"], "bright");
    assert_eq!(list[0]["concept"]["negative"], "dark");
    assert_eq!(list[0]["concept"]["target"], "neutral");
    assert_eq!(list[0]["alpha_range"], json!([-3.0, 3.0]));
}

#[tokio::test]
async fn empty_stack_is_flagged_as_base() {
    let (status, body) = post(json!({"prompt": "neutral", "seed": 4, "sliders": [], "include_base": true})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: GenerateResponse = serde_json::from_value(body).unwrap();
    assert!(resp.is_base);
    assert_eq!(Some(resp.image), resp.base_image);

    let (_, body) = post(json!({"prompt": "neutral", "seed": 4, "sliders": [{"name": "brightness", "scale": 0.0}]})).await;
    assert_eq!(body["is_base"], true);
}

#[tokio::test]
async fn fixed_seed_payloads_are_byte_identical() {
    let req = json!({"prompt": "neutral", "seed": 9, "steps": 5, "sliders": [{"name": "brightness", "scale": 1.5}]});
    let (_, a) = post(req.clone()).await;
    let (_, b) = post(req).await;
    assert_eq!(a["is_base"], false);
    assert_eq!(a["image"], b["image"]);
    assert_eq!(a["applied"], json!([{"name": "brightness", "scale": 1.5}]));
}

#[tokio::test]
async fn concurrent_requests_match_serial_ones() {
    let body = |seed: u64| json!({"prompt": "bright", "seed": seed, "sliders": [{"name": "brightness", "scale": -1.0}]});
    let mut serial = Vec::new();
    for seed in 0..6 {
        serial.push(post(body(seed)).await.1["image"].clone());
    }
    let handles: Vec<_> = (0..6).map(|seed| tokio::spawn(post(body(seed)))).collect();
    for (seed, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap().1["image"], serial[seed], "seed {seed}");
    }
}

#[tokio::test]
async fn errors_are_structured() {
    let (status, body) = post(json!({"prompt": "neutral", "seed": 1, "sliders": [{"name": "ghost", "scale": 1.0}]})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_slider");
    assert!(body["message"].as_str().unwrap().contains("ghost"));

    let (status, body) = post(json!({"prompt": "neutral", "seed": 1, "steps": 0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "steps");

    let (status, body) = post(json!({"prompt": "purple", "seed": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "prompt");

    let (status, body) = post(json!({"prompt": "neutral", "seed": 1, "sliders": [{"name": "brightness", "scale": "big"}]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_request");

    let (status, body) = post(json!({"prompt": "neutral", "seed": 1, "sliders": [
        {"name": "brightness", "scale": 1.0}, {"name": "brightness", "scale": 2.0}]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "duplicate_slider");

    let resp = router(engine()).oneshot(Request::get("/api/nope").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}
