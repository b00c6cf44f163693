use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tightbox_core::dataset::synth::{synth_generate, Background};
use tightbox_core::dataset::{load_labels, ImagePatch, ImageSet, LabelSource, SampleConfig};
use tightbox_core::geometry::{BBox, EdgeErrorModel};
use tightbox_core::model::{CheckpointMeta, ModelError, Regressor, TruthEcho, TRUTH_ECHO_BACKBONE};
use tightbox_service::{router, AppState, ImageCatalog, LabelStore};

const PATCH: usize = 64;

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        backbone: TRUTH_ECHO_BACKBONE.into(),
        input_size: PATCH,
        head: vec![],
        expand_ratio: 0.15,
        error_model: EdgeErrorModel::default(),
        pad_value: -1.0,
        init: "external".into(),
        format_version: 1,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    labels: std::path::PathBuf,
    truths: Vec<(String, BBox)>,
}

/// Three synthetic images, one of them in a subdirectory.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut truths = Vec::new();
    let mut set = ImageSet::new();
    for (k, (mut img, inst)) in synth_generate(3, 8, 120, 90, Background::Noise).into_iter().enumerate() {
        if k == 2 {
            img.id = format!("sub/{}", img.id);
        }
        truths.push((img.id.clone(), inst.true_box.unwrap()));
        set.insert(img);
    }
    set.save_dir(&data).unwrap();
    Fixture {
        labels: dir.path().join("labels.jsonl"),
        data,
        _dir: dir,
        truths,
    }
}

fn state(fx: &Fixture, model: Option<Arc<dyn Regressor>>) -> Arc<AppState> {
    let st = Arc::new(AppState::new(
        ImageCatalog::scan(&fx.data).unwrap(),
        LabelStore::open(&fx.labels).unwrap(),
    ));
    if let Some(m) = model {
        assert!(st.install_model(m, meta()));
    }
    st
}

fn echo(fx: &Fixture) -> Arc<dyn Regressor> {
    let mut e = TruthEcho::new(PATCH);
    for (id, b) in &fx.truths {
        e.insert(id.clone(), *b);
    }
    Arc::new(e)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_before_and_after_model_load() {
    let fx = fixture();
    let st = state(&fx, None);
    let app = router(st.clone());
    let (s, _) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    st.install_model(echo(&fx), meta());
    let (s, v) = call_json(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"]["format_version"], 1);
    assert!(v["coordinates"].is_string());
}

#[tokio::test]
async fn image_listing_and_fetch() {
    let fx = fixture();
    let app = router(state(&fx, Some(echo(&fx))));
    let (s, p1) = call_json(&app, Method::GET, "/images?page=1&per_page=2", None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, p2) = call_json(&app, Method::GET, "/images?page=2&per_page=2", None).await;
    assert_eq!(p1["images"].as_array().unwrap().len(), 2);
    assert_eq!(p2["images"].as_array().unwrap().len(), 1);
    assert_eq!(p1["total"], 3);

    let (_, all) = call_json(&app, Method::GET, "/images", None).await;
    let entries = all["images"].as_array().unwrap().clone();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().any(|e| e["id"].as_str().unwrap().starts_with("sub/")));
    for e in entries {
        let id = e["id"].as_str().unwrap();
        let (s, bytes) = call(&app, Method::GET, &format!("/images/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width() as u64, img.height() as u64), (e["width"].as_u64().unwrap(), e["height"].as_u64().unwrap()));
    }
    let (s, _) = call(&app, Method::GET, "/images/nope.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::GET, "/images/../labels.jsonl", None).await;
    assert_ne!(s, StatusCode::OK);
}

#[tokio::test]
async fn refine_with_oracle_double() {
    let fx = fixture();
    let app = router(state(&fx, Some(echo(&fx))));
    for (id, truth) in &fx.truths {
        let rough = [truth.x_min() - 3.0, truth.y_min() + 2.0, truth.x_max() + 4.0, truth.y_max() - 1.5];
        let req = json!({"image": id, "box": rough});
        let (s, a) = call_json(&app, Method::POST, "/refine", Some(req.clone())).await;
        assert_eq!(s, StatusCode::OK, "{a}");
        let got: Vec<f64> = serde_json::from_value(a["box"].clone()).unwrap();
        for (g, t) in got.iter().zip(truth.to_array()) {
            assert!((g - t).abs() < 1e-6);
        }
        assert!(a["latency_ms"].as_f64().unwrap() >= 0.0);
        let (_, b) = call_json(&app, Method::POST, "/refine", Some(req)).await;
        assert_eq!(a["box"], b["box"]);
    }
}

#[tokio::test]
async fn refine_rejects_bad_requests() {
    let fx = fixture();
    let app = router(state(&fx, Some(echo(&fx))));
    let id = &fx.truths[0].0;
    let (s, _) = call(&app, Method::POST, "/refine", Some(json!({"image": id, "box": [50, 10, 40, 60]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::POST, "/refine", Some(json!({"image": id, "box": [10, 10, 13, 13]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::POST, "/refine", Some(json!({"image": "missing.png", "box": [0, 0, 20, 20]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

struct Collapsing;

impl Regressor for Collapsing {
    fn input_size(&self) -> usize {
        PATCH
    }

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError> {
        Ok(vec![[0.5, 0.5, 0.501, 0.9]; patches.len()])
    }
}

#[tokio::test]
async fn degenerate_refinement_is_422() {
    let fx = fixture();
    let app = router(state(&fx, Some(Arc::new(Collapsing))));
    let (s, _) = call(&app, Method::POST, "/refine", Some(json!({"image": fx.truths[0].0, "box": [10, 10, 60, 80]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

/// Answers with fixed patch coordinates far outside the window.
struct Wild(f64);

impl Regressor for Wild {
    fn input_size(&self) -> usize {
        PATCH
    }

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError> {
        Ok(vec![[-self.0, 0.3, 1.0 + self.0, 0.2]; patches.len()])
    }
}

#[tokio::test]
async fn refined_boxes_stay_inside_the_image() {
    let fx = fixture();
    for spread in [0.0, 0.5, 3.0] {
        let app = router(state(&fx, Some(Arc::new(Wild(spread)))));
        for x in [0.0, 30.0, 90.0] {
            let (s, v) = call_json(&app, Method::POST, "/refine", Some(json!({"image": fx.truths[1].0, "box": [x, 5.0, x + 30.0, 85.0]}))).await;
            if s == StatusCode::OK {
                let b: BBox = serde_json::from_value(v["box"].clone()).unwrap();
                assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= 120.0 && b.y_max() <= 90.0);
            } else {
                assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
            }
        }
    }
}

struct Slow;

impl Regressor for Slow {
    fn input_size(&self) -> usize {
        PATCH
    }

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError> {
        std::thread::sleep(Duration::from_millis(150));
        Ok(vec![[0.1, 0.1, 0.9, 0.9]; patches.len()])
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_returns_429() {
    let fx = fixture();
    let st = Arc::new(AppState::with_queue_depth(
        ImageCatalog::scan(&fx.data).unwrap(),
        LabelStore::open(&fx.labels).unwrap(),
        1,
    ));
    st.install_model(Arc::new(Slow), meta());
    let app = router(st);
    let id = fx.truths[0].0.clone();
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            let id = id.clone();
            tokio::spawn(async move { call(&app, Method::POST, "/refine", Some(json!({"image": id, "box": [10, 10, 60, 80]}))).await.0 })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert!(codes.contains(&StatusCode::OK));
    assert!(codes.contains(&StatusCode::TOO_MANY_REQUESTS), "{codes:?}");
}

#[tokio::test]
async fn label_round_trip_delete_and_restart() {
    let fx = fixture();
    let img = fx.truths[0].0.clone();
    let app = router(state(&fx, Some(echo(&fx))));
    let (s, v) = call_json(&app, Method::POST, "/labels", Some(json!({"image": img, "class": "person", "box": [1.5, 2, 30, 40], "source": "model"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let first = v["id"].as_str().unwrap().to_string();
    assert_eq!(first.len(), 16);
    let (_, v) = call_json(&app, Method::POST, "/labels", Some(json!({"image": img, "class": "person", "box": [5, 5, 25, 35], "source": "human"}))).await;
    let second = v["id"].as_str().unwrap().to_string();

    let (s, list) = call_json(&app, Method::GET, &format!("/labels?image={img}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["box"], json!([1.5, 2.0, 30.0, 40.0]));
    assert_eq!(list[0]["source"], "model");

    let (s, _) = call(&app, Method::DELETE, &format!("/labels/{first}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, Method::DELETE, &format!("/labels/{first}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, list) = call_json(&app, Method::GET, "/labels", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    drop(app);

    let app = router(state(&fx, Some(echo(&fx))));
    let (_, list) = call_json(&app, Method::GET, "/labels", None).await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["id"], second.as_str());
    assert_eq!(list[0]["box"], json!([5.0, 5.0, 25.0, 35.0]));
}

#[tokio::test]
async fn label_validation() {
    let fx = fixture();
    let app = router(state(&fx, Some(echo(&fx))));
    let img = &fx.truths[0].0;
    for body in [
        json!({"image": img, "class": "person", "box": [30, 2, 10, 40], "source": "human"}),
        json!({"image": img, "class": "person", "box": [0, 0, 500, 40], "source": "human"}),
        json!({"image": "missing.png", "class": "person", "box": [0, 0, 5, 5], "source": "human"}),
        json!({"image": img, "class": "", "box": [0, 0, 5, 5], "source": "human"}),
    ] {
        let (s, _) = call(&app, Method::POST, "/labels", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }
    let (s, _) = call(&app, Method::POST, "/labels", Some(json!({"image": img, "class": "p", "box": [0, 0, 5, 5], "source": "robot"}))).await;
    assert!(s.is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_label_writes() {
    let fx = fixture();
    let app = router(state(&fx, Some(echo(&fx))));
    let img = fx.truths[0].0.clone();
    let clients: Vec<_> = (0..8)
        .map(|c| {
            let app = app.clone();
            let img = img.clone();
            tokio::spawn(async move {
                let mut ids = Vec::new();
                for k in 0..100 {
                    let x = (k % 50) as f64;
                    let body = json!({"image": img, "class": format!("c{c}"), "box": [x, 1.0, x + 10.0, 20.0], "source": "human"});
                    let (s, v) = call_json(&app, Method::POST, "/labels", Some(body)).await;
                    assert_eq!(s, StatusCode::CREATED);
                    ids.push(v["id"].as_str().unwrap().to_string());
                }
                ids
            })
        })
        .collect();
    let mut ids = HashSet::new();
    for c in clients {
        ids.extend(c.await.unwrap());
    }
    assert_eq!(ids.len(), 800);
    let (_, list) = call_json(&app, Method::GET, "/labels", None).await;
    assert_eq!(list.as_array().unwrap().len(), 800);
    check_export(&fx.labels, 800);
    let reopened = LabelStore::open(&fx.labels).unwrap();
    assert_eq!(reopened.len(), 800);
}

fn check_export(path: &Path, n: usize) {
    let store = LabelStore::open(path).unwrap();
    let exported = load_labels(path).unwrap();
    assert_eq!(exported.len(), n);
    for (s, e) in store.list(None).iter().zip(&exported) {
        assert_eq!(e.image_id, s.image);
        assert_eq!(e.class_tag, s.class);
        assert_eq!(e.source, s.source);
        let b = if s.source == LabelSource::Human { e.true_box } else { e.prelabel_box };
        assert_eq!(b, Some(s.bbox));
    }
}

#[test]
fn sample_config_follows_checkpoint() {
    let cfg = meta().sample_config();
    assert_eq!(cfg, SampleConfig { patch_size: PATCH, ..SampleConfig::default() });
}
