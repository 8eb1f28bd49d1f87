#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use featseg_core::engine::encode_grey_png;
use featseg_core::{FeatureSetConfig, Tensor};
use featseg_workbench::config::Config;
use featseg_workbench::service::{router, AppState};
use featseg_workbench::store::ProjectStore;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Dark left half, bright right half, with a little deterministic texture.
pub fn two_region_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn_hwc(h, w, 1, |y, x, _| {
        let base = if x < w / 2 { 0.25 } else { 0.75 };
        base + 0.02 * (((y * 7 + x * 13) % 5) as f32 - 2.0)
    })
}

pub fn two_region_png(h: usize, w: usize) -> Vec<u8> {
    encode_grey_png(&two_region_image(h, w)).unwrap()
}

/// One short horizontal stroke per half.
pub fn two_class_strokes(h: usize, w: usize) -> Value {
    json!([
        {"class": 1, "row": h / 3, "start": 2, "len": w / 4},
        {"class": 2, "row": 2 * h / 3, "start": w / 2 + 2, "len": w / 4},
    ])
}

/// Small filter bank so debug-build tests stay quick.
pub fn small_features() -> FeatureSetConfig {
    FeatureSetConfig {
        sigmas: vec![0.0, 1.0, 2.0],
        membrane_kernel_size: 5,
        ..Default::default()
    }
}

pub fn test_config(root: &std::path::Path) -> Config {
    let mut cfg = Config::default();
    cfg.store.root = root.to_path_buf();
    cfg.features = small_features();
    cfg.train.gbt.n_rounds = 20;
    cfg
}

pub fn app(root: &std::path::Path) -> Router {
    let cfg = test_config(root);
    let store = ProjectStore::open(root).unwrap();
    router(AppState::new(store, cfg).unwrap())
}

pub fn app_with(cfg: Config) -> (Router, Arc<AppState>) {
    let store = ProjectStore::open(&cfg.store.root).unwrap();
    let st = AppState::new(store, cfg).unwrap();
    (router(st.clone()), st)
}

pub async fn send(app: &Router, method: &str, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn send_json(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, method, uri, Some("application/json"), serde_json::to_vec(&body).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, "GET", uri, None, Vec::new()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Polls a job until it leaves the queue; returns its final JSON.
pub async fn wait_job(app: &Router, job_id: u64) -> Value {
    for _ in 0..6000 {
        let (s, v) = get_json(app, &format!("/jobs/{job_id}")).await;
        assert_eq!(s, StatusCode::OK);
        if v["state"] == "done" || v["state"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job_id} did not finish");
}

/// create -> upload -> label; returns the project id.
pub async fn labelled_project(app: &Router, h: usize, w: usize) -> String {
    let (s, v) = send_json(app, "POST", "/projects", json!({"class_count": 2})).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let (s, _) = send(app, "POST", &format!("/projects/{id}/image"), Some("image/png"), two_region_png(h, w)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = send_json(app, "PUT", &format!("/projects/{id}/labels"), json!({"records": two_class_strokes(h, w)})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    id
}

pub async fn train_and_wait(app: &Router, id: &str, body: Value) -> Value {
    let (s, v) = send_json(app, "POST", &format!("/projects/{id}/train"), body).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let job = wait_job(app, v["job_id"].as_u64().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    job
}
