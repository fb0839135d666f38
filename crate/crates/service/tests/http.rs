use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use c2g_core::bundle::{bundle_files, write_scene_bundle, write_source_bundle};
use c2g_core::eval::{eval_pipeline_config, make_trial, Trial, TrialConfig};
use c2g_core::grounding::Method;
use c2g_core::pipeline::{run_method, GraspResult, Silent};
use c2g_core::synthetic::Preset;
use c2g_service::server::{router, AppState};
use c2g_service::store::Store;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "c2g-test-boundary";
const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn small_overrides() -> Value {
    json!({"optimizer": {"iterations": 150, "rotations_per_voxel": 4}})
}

fn multipart(dir: &Path) -> Vec<u8> {
    let mut body = Vec::new();
    for rel in bundle_files(dir).unwrap() {
        let name = rel.to_string_lossy();
        body.extend(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{name}\"\r\n\
                 Content-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend(std::fs::read(dir.join(&rel)).unwrap());
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, bytes.to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = get(app, uri).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn upload(app: &Router, uri: &str, dir: &Path) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(dir)))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn assert_error(body: &Value, stage: &str) {
    let e = &body["error"];
    assert_eq!(e["stage"], stage, "{body}");
    assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
}

async fn wait_for(app: &Router, job: &str) -> Value {
    for _ in 0..1200 {
        let (s, v) = get_json(app, &format!("/jobs/{job}")).await;
        assert_eq!(s, StatusCode::OK);
        let f = v["progress"]["fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
        if v["state"] == "done" || v["state"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job} did not finish");
}

struct Fixture {
    _tmp: tempfile::TempDir,
    app: Router,
    trial: Trial,
    scene_id: String,
    source_id: String,
}

async fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let trial = make_trial(Preset::Toy, &TrialConfig::default(), 3, 0).unwrap();
    let scene_dir = tmp.path().join("in/scene");
    let source_dir = tmp.path().join("in/source");
    write_scene_bundle(&trial.scene, &scene_dir).unwrap();
    write_source_bundle(&trial.source, &source_dir).unwrap();
    let store = Store::open(&tmp.path().join("data")).unwrap();
    let app = router(AppState::new(store, eval_pipeline_config(), 2));

    let (s, scene) = upload(&app, "/scenes", &scene_dir).await;
    assert_eq!(s, StatusCode::CREATED, "{scene}");
    let (s, source) = upload(&app, "/sources", &source_dir).await;
    assert_eq!(s, StatusCode::CREATED, "{source}");
    Fixture {
        scene_id: scene["id"].as_str().unwrap().to_string(),
        source_id: source["id"].as_str().unwrap().to_string(),
        _tmp: tmp,
        app,
        trial,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn uploads_are_content_addressed() {
    let f = fixture().await;
    let dir = f._tmp.path().join("in/scene");
    let (s, again) = upload(&f.app, "/scenes", &dir).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(again["id"], f.scene_id.as_str());

    let (s, body) = upload(&f.app, "/sources", &dir).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "input");

    let (_, list) = get_json(&f.app, "/scenes").await;
    assert_eq!(list["scenes"], json!([f.scene_id]));

    // A restarted store finds the same bundles.
    let store = Store::open(&f._tmp.path().join("data")).unwrap();
    assert_eq!(store.scene_ids(), vec![f.scene_id.clone()]);
    assert_eq!(store.source_ids(), vec![f.source_id.clone()]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn truncated_upload_is_rejected() {
    let f = fixture().await;
    let dir = f._tmp.path().join("in/source");
    let dino = dir.join("dino.tsr");
    let bytes = std::fs::read(&dino).unwrap();
    std::fs::write(&dino, &bytes[..bytes.len() - 7]).unwrap();
    let (s, body) = upload(&f.app, "/sources", &dir).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_error(&body, "input");
    assert!(body["error"]["message"].as_str().unwrap().contains("dino"), "{body}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scene_and_source_views() {
    let f = fixture().await;
    let (s, summary) = get_json(&f.app, &format!("/scenes/{}", f.scene_id)).await;
    assert_eq!(s, StatusCode::OK);
    let views = summary["views"].as_array().unwrap();
    assert_eq!(views.len(), f.trial.scene.views.len());

    let (s, png) = get(&f.app, views[0]["rgb_url"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(PNG_MAGIC));

    let (s, pts) = get_json(&f.app, &format!("/scenes/{}/points?stride=8", f.scene_id)).await;
    assert_eq!(s, StatusCode::OK);
    let n = pts["points"].as_array().unwrap().len();
    assert!(n > 100);
    assert_eq!(pts["colors"].as_array().unwrap().len(), n);

    let (s, src) = get_json(&f.app, &format!("/sources/{}", f.source_id)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, png) = get(&f.app, src["image_url"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(PNG_MAGIC));

    let (s, body) = get_json(&f.app, "/scenes/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "input");
    let (s, _) = get_json(&f.app, "/health").await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn annotate_returns_descriptors_and_images() {
    let f = fixture().await;
    let (u, v) = f.trial.click;
    let (s, ann) = post_json(
        &f.app,
        "/annotate",
        json!({"scene_id": f.scene_id, "source_id": f.source_id, "click": [u, v]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{ann}");
    let grid = ann["feature_grid"].as_array().unwrap();
    assert_eq!(grid.len(), 2);
    assert!(ann["centroids"].is_object());
    for key in ["heatmap_url", "overlay_url"] {
        let (s, png) = get(&f.app, ann[key].as_str().unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert!(png.starts_with(PNG_MAGIC));
    }

    let (s, body) = post_json(
        &f.app,
        "/annotate",
        json!({"source_id": f.source_id, "click": [-5.0, 3.0]}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "annotation");

    let (s, body) = post_json(&f.app, "/annotate", json!({"source_id": f.source_id, "click": [1.0]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "annotation");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn grasp_job_matches_direct_run() {
    let f = fixture().await;
    let (u, v) = f.trial.click;
    let req = json!({
        "scene_id": f.scene_id,
        "source_id": f.source_id,
        "click": [u, v],
        "config_overrides": small_overrides(),
        "seed": 5,
    });
    let (s, accepted) = post_json(&f.app, "/grasp", req).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{accepted}");
    let job = accepted["job_id"].as_str().unwrap();

    let view = wait_for(&f.app, job).await;
    assert_eq!(view["state"], "done", "{view}");
    assert_eq!(view["progress"]["fraction"], 1.0);
    assert!(!view["loss_trace"].as_array().unwrap().is_empty());

    let (s, body) = get(&f.app, accepted["result_url"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let served: GraspResult = serde_json::from_slice(&body).unwrap();

    let mut cfg = eval_pipeline_config().with_overrides(&small_overrides()).unwrap();
    cfg.seed = 5;
    let direct = run_method(
        &f.trial.scene,
        &f.trial.source,
        f.trial.click,
        Method::C2g,
        &cfg,
        &Silent,
    )
    .unwrap();
    assert_eq!(served.canonical(), direct.result.canonical());

    let slice = f.trial.scene.workspace.size[2] / f.trial.scene.voxel_size / 2.0;
    let uri = format!(
        "/scenes/{}/voxels?channel=sim_dino&slice={}",
        f.scene_id, slice as usize
    );
    let (s, png) = get(&f.app, &uri).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&png));
    assert!(png.starts_with(PNG_MAGIC));

    let uri = format!("/scenes/{}/voxels?channel=nope&slice=0", f.scene_id);
    let (s, _) = get(&f.app, &uri).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn grasp_request_errors() {
    let f = fixture().await;
    let (u, v) = f.trial.click;
    let (s, body) = post_json(
        &f.app,
        "/grasp",
        json!({"scene_id": "missing", "source_id": f.source_id, "click": [u, v]}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "input");

    let (s, body) = post_json(
        &f.app,
        "/grasp",
        json!({"scene_id": f.scene_id, "source_id": f.source_id, "click": [u, v],
               "config_overrides": {"grounding": {"theta_dino": 2.0}}}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "config");

    let (s, body) = post_json(
        &f.app,
        "/grasp",
        json!({"scene_id": f.scene_id, "source_id": f.source_id, "click": [1e6, 0.0]}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "annotation");

    let (s, body) = get_json(&f.app, "/jobs/job-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "input");

    // Background click: accepted, then fails in the annotation stage.
    let (s, accepted) = post_json(
        &f.app,
        "/grasp",
        json!({"scene_id": f.scene_id, "source_id": f.source_id, "click": [2.0, 2.0]}),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = accepted["job_id"].as_str().unwrap();
    let view = wait_for(&f.app, job).await;
    assert_eq!(view["state"], "failed");
    assert_eq!(view["error"]["stage"], "annotation");
    let (s, body) = get_json(&f.app, &format!("/jobs/{job}/result")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "annotation");
}

#[test]
fn state_is_shareable() {
    fn check<T: Send + Sync>() {}
    check::<Arc<AppState>>();
}
