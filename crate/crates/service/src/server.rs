//! HTTP API over the store and job registry.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use c2g_core::annotator::{annotate_traced, colormap, heatmap_overlay, AnnotationError};
use c2g_core::bundle::{scene_manifest, RgbImage, SceneBundle, SourceBundle};
use c2g_core::field::grid_dims;
use c2g_core::grounding::Method;
use c2g_core::pipeline::{run_annotated, C2GConfig, Observer, PipelineError, Stage};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::jobs::{Job, Registry};
use crate::store::{safe_relative, Store, StoreError};

const UPLOAD_LIMIT: usize = 512 * 1024 * 1024;

/// `{"error": {"stage", "message"}}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub stage: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, stage: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "input", format!("unknown {what} '{id}'"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"stage": self.stage, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "input", e.to_string()),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "input", e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Config(_) | PipelineError::Input(_) | PipelineError::Annotation(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.stage(), e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct AnnotationImages {
    heatmap: Vec<u8>,
    overlay: Vec<u8>,
}

pub struct AppState {
    pub store: Store,
    pub jobs: Registry,
    pub config: C2GConfig,
    workers: Arc<Semaphore>,
    annotations: RwLock<HashMap<String, AnnotationImages>>,
    next_annotation: AtomicU64,
}

impl AppState {
    pub fn new(store: Store, config: C2GConfig, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            store,
            jobs: Registry::default(),
            config,
            workers: Arc::new(Semaphore::new(workers.max(1))),
            annotations: RwLock::new(HashMap::new()),
            next_annotation: AtomicU64::new(0),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/scenes", get(list_scenes).post(upload_scene))
        .route("/scenes/{id}", get(scene_summary))
        .route("/scenes/{id}/views/{name}/rgb", get(view_rgb))
        .route("/scenes/{id}/points", get(scene_points))
        .route("/scenes/{id}/voxels", get(voxel_slice))
        .route("/sources", get(list_sources).post(upload_source))
        .route("/sources/{id}", get(source_summary))
        .route("/sources/{id}/image", get(source_image))
        .route("/annotate", post(annotate))
        .route("/annotations/{id}/heatmap.png", get(annotation_heatmap))
        .route("/annotations/{id}/overlay.png", get(annotation_overlay))
        .route("/grasp", post(grasp))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/result", get(job_result))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .layer(tower_http::trace::TraceLayer::new_for_http())
        .with_state(state)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn encode(img: &RgbImage) -> ApiResult<Response> {
    img.encode_png()
        .map(png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "output", e))
}

fn scene(state: &AppState, id: &str) -> ApiResult<Arc<SceneBundle>> {
    state.store.scene(id).ok_or_else(|| ApiError::not_found("scene", id))
}

fn source(state: &AppState, id: &str) -> ApiResult<Arc<SourceBundle>> {
    state.store.source(id).ok_or_else(|| ApiError::not_found("source", id))
}

async fn read_upload(mut mp: Multipart) -> ApiResult<Vec<(PathBuf, Vec<u8>)>> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "input", m);
    let mut files = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(|e| bad(e.to_string()))? {
        let name = field
            .file_name()
            .or(field.name())
            .map(str::to_string)
            .ok_or_else(|| bad("multipart part without a file name".into()))?;
        let rel = safe_relative(&name).ok_or_else(|| bad(format!("unsafe file name '{name}'")))?;
        let bytes = field.bytes().await.map_err(|e| bad(e.to_string()))?;
        files.push((rel, bytes.to_vec()));
    }
    Ok(files)
}

async fn upload_scene(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Response> {
    let files = read_upload(mp).await?;
    let st = state.clone();
    let id = tokio::task::spawn_blocking(move || st.store.put_scene(files))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "input", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({"id": id, "kind": "scene"}))).into_response())
}

async fn upload_source(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Response> {
    let files = read_upload(mp).await?;
    let st = state.clone();
    let id = tokio::task::spawn_blocking(move || st.store.put_source(files))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "input", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({"id": id, "kind": "source"}))).into_response())
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"scenes": state.store.scene_ids()}))
}

async fn list_sources(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"sources": state.store.source_ids()}))
}

async fn scene_summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let b = scene(&state, &id)?;
    let dims = grid_dims(&b.workspace, b.voxel_size).ok();
    let views: Vec<Value> = b
        .views
        .iter()
        .map(|v| {
            json!({
                "name": v.name,
                "width": v.camera.width,
                "height": v.camera.height,
                "dino": [v.dino.height, v.dino.width, v.dino.channels],
                "sd": [v.sd.height, v.sd.width, v.sd.channels],
                "rgb_url": format!("/scenes/{id}/views/{}/rgb", v.name),
            })
        })
        .collect();
    Ok(Json(json!({
        "id": id,
        "manifest": scene_manifest(&b),
        "grid_dims": dims,
        "views": views,
    })))
}

async fn view_rgb(State(state): State<Arc<AppState>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let b = scene(&state, &id)?;
    let v = b.view(&name).ok_or_else(|| ApiError::not_found("view", &name))?;
    encode(&v.rgb)
}

#[derive(Deserialize)]
struct PointsQuery {
    stride: Option<usize>,
}

/// Back-projected depth pixels with their colors.
async fn scene_points(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PointsQuery>,
) -> ApiResult<Json<Value>> {
    let b = scene(&state, &id)?;
    let stride = q.stride.unwrap_or(4).max(1);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for v in &b.views {
        for row in (0..v.depth.height).step_by(stride) {
            for col in (0..v.depth.width).step_by(stride) {
                let d = v.depth.at(col, row);
                if !c2g_core::bundle::DepthMap::is_valid_value(d) {
                    continue;
                }
                if let Ok(p) = v.camera.backproject(col as f64, row as f64, d as f64) {
                    if b.workspace.contains(&p) {
                        points.push([p.x, p.y, p.z]);
                        colors.push(v.rgb.get(col, row));
                    }
                }
            }
        }
    }
    Ok(Json(json!({"points": points, "colors": colors})))
}

#[derive(Deserialize)]
struct VoxelQuery {
    channel: String,
    slice: usize,
    job: Option<String>,
}

/// One z slice of a grounding channel, min-max scaled over the whole channel.
async fn voxel_slice(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<VoxelQuery>,
) -> ApiResult<Response> {
    scene(&state, &id)?;
    let job = match &q.job {
        Some(j) => state.jobs.get(j).ok_or_else(|| ApiError::not_found("job", j))?,
        None => state.jobs.latest_for(&id).ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "grounding",
                "no finished grasp job for this scene",
            )
        })?,
    };
    if job.view().scene_id != id {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "input",
            "job belongs to another scene",
        ));
    }
    let done = job
        .result()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "grounding", "job has no result yet"))?;
    let grounding = &done.1;
    let values = grounding.channel(&q.channel).ok_or_else(|| {
        let names: Vec<&str> = grounding.channels.iter().map(|(n, _)| n.as_str()).collect();
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "input",
            format!("unknown channel '{}', have {names:?}", q.channel),
        )
    })?;
    let [nx, ny, nz] = grounding.area.dims;
    if q.slice >= nz {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "input",
            format!("slice {} outside 0..{nz}", q.slice),
        ));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let v = values[i + nx * (j + ny * q.slice)];
            // +y up in the image.
            img.put(i, ny - 1 - j, colormap((v - lo) / span));
        }
    }
    encode(&img)
}

async fn source_summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = source(&state, &id)?;
    Ok(Json(json!({
        "id": id,
        "width": s.image.width,
        "height": s.image.height,
        "dino": [s.dino.height, s.dino.width, s.dino.channels],
        "sd": [s.sd.height, s.sd.width, s.sd.channels],
        "image_url": format!("/sources/{id}/image"),
    })))
}

async fn source_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    encode(&source(&state, &id)?.image)
}

fn parse_click(click: &[f64]) -> ApiResult<(f64, f64)> {
    match click {
        [u, v] if u.is_finite() && v.is_finite() => Ok((*u, *v)),
        _ => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "annotation",
            format!("click must be [u, v], got {click:?}"),
        )),
    }
}

fn check_click(src: &SourceBundle, (u, v): (f64, f64)) -> ApiResult<()> {
    let (w, h) = (src.image.width, src.image.height);
    if u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64 {
        Ok(())
    } else {
        Err(PipelineError::from(AnnotationError::ClickOutside {
            u,
            v,
            width: w,
            height: h,
        })
        .into())
    }
}

fn config_with(base: &C2GConfig, overrides: Option<&Value>, seed: Option<u64>) -> ApiResult<C2GConfig> {
    let mut cfg = match overrides {
        Some(o) if !o.is_null() => base.with_overrides(o)?,
        _ => base.clone(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Deserialize)]
struct AnnotateRequest {
    scene_id: Option<String>,
    source_id: String,
    click: Vec<f64>,
    #[serde(default)]
    config_overrides: Option<Value>,
}

async fn annotate(State(state): State<Arc<AppState>>, Json(req): Json<AnnotateRequest>) -> ApiResult<Json<Value>> {
    let src = source(&state, &req.source_id)?;
    if let Some(sid) = &req.scene_id {
        let sc = scene(&state, sid)?;
        src.check_compatible(&sc)
            .map_err(|e| ApiError::from(PipelineError::Input(e.to_string())))?;
    }
    let click = parse_click(&req.click)?;
    let cfg = config_with(&state.config, req.config_overrides.as_ref(), None)?;
    let trace = annotate_traced(&src, click, &cfg.annotator).map_err(PipelineError::from)?;

    let h = &trace.heatmap;
    let mut heat = RgbImage::new(h.width, h.height);
    for (i, &t) in h.values.iter().enumerate() {
        heat.put(i % h.width, i / h.width, colormap(t));
    }
    let out = |e: String| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "output", e);
    let images = AnnotationImages {
        heatmap: heat.encode_png().map_err(out)?,
        overlay: heatmap_overlay(&src.image, h).encode_png().map_err(out)?,
    };
    let aid = format!("ann-{:06}", state.next_annotation.fetch_add(1, Ordering::Relaxed) + 1);
    state.annotations.write().unwrap().insert(aid.clone(), images);
    Ok(Json(json!({
        "annotation_id": aid,
        "annotation": trace.annotation,
        "centroids": trace.annotation.centroid_json(),
        "feature_grid": [h.width, h.height],
        "heatmap_url": format!("/annotations/{aid}/heatmap.png"),
        "overlay_url": format!("/annotations/{aid}/overlay.png"),
    })))
}

async fn annotation_heatmap(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let map = state.annotations.read().unwrap();
    let a = map.get(&id).ok_or_else(|| ApiError::not_found("annotation", &id))?;
    Ok(png(a.heatmap.clone()))
}

async fn annotation_overlay(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let map = state.annotations.read().unwrap();
    let a = map.get(&id).ok_or_else(|| ApiError::not_found("annotation", &id))?;
    Ok(png(a.overlay.clone()))
}

#[derive(Deserialize)]
struct GraspRequest {
    scene_id: String,
    source_id: String,
    click: Vec<f64>,
    #[serde(default)]
    config_overrides: Option<Value>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    method: Option<String>,
}

async fn grasp(State(state): State<Arc<AppState>>, Json(req): Json<GraspRequest>) -> ApiResult<Response> {
    let sc = scene(&state, &req.scene_id)?;
    let src = source(&state, &req.source_id)?;
    let click = parse_click(&req.click)?;
    let cfg = config_with(&state.config, req.config_overrides.as_ref(), req.seed)?;
    let method = match req.method.as_deref() {
        None => Method::C2g,
        Some(m) => Method::parse(m).ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "config",
                format!("unknown method '{m}'"),
            )
        })?,
    };
    src.check_compatible(&sc)
        .map_err(|e| ApiError::from(PipelineError::Input(e.to_string())))?;
    check_click(&src, click)?;

    let (job_id, job) = state.jobs.create(&req.scene_id, &req.source_id);
    let st = state.clone();
    let scene_id = req.scene_id.clone();
    let jid = job_id.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.workers.clone().acquire_owned().await else {
            job.fail("config", "worker pool closed".into());
            return;
        };
        job.start();
        let st2 = st.clone();
        let job2 = job.clone();
        let run = tokio::task::spawn_blocking(move || {
            run_job(&st2, &job2, &scene_id, &sc, &src, click, method, &cfg);
            if job2.result().is_some() {
                st2.jobs.mark_latest(&scene_id, &jid);
            }
        })
        .await;
        if let Err(e) = run {
            job.fail("optimizer", format!("worker panicked: {e}"));
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({
            "job_id": job_id,
            "job_url": format!("/jobs/{job_id}"),
            "result_url": format!("/jobs/{job_id}/result"),
        })),
    )
        .into_response())
}

#[allow(clippy::too_many_arguments)]
fn run_job(
    state: &AppState,
    job: &Job,
    scene_id: &str,
    scene: &SceneBundle,
    source: &SourceBundle,
    click: (f64, f64),
    method: Method,
    cfg: &C2GConfig,
) {
    job.stage(Stage::Annotation);
    let t = Instant::now();
    let trace = match annotate_traced(source, click, &cfg.annotator) {
        Ok(t) => t,
        Err(e) => return job.fail("annotation", e.to_string()),
    };
    let annotation_ms = t.elapsed().as_secs_f64() * 1e3;
    job.stage(Stage::Field);
    let prepared = match state.store.prepared(scene_id, scene, cfg) {
        Ok(p) => p,
        Err(e) => return job.fail(e.stage(), e.to_string()),
    };
    match run_annotated(&prepared, trace, annotation_ms, method, cfg, job) {
        Ok(out) => job.finish(out.result, out.grounding),
        Err(e) => job.fail(e.stage(), e.to_string()),
    }
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    Ok(Json(serde_json::to_value(job.view()).expect("job serializes")))
}

async fn job_result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    if let Some(done) = job.result() {
        let body = serde_json::to_string(&done.0).expect("result serializes");
        return Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response());
    }
    let view = job.view();
    match view.error {
        Some(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &e.stage, e.message)),
        None => Err(ApiError::new(
            StatusCode::CONFLICT,
            "optimizer",
            format!("job {id} is {:?}", view.state).to_lowercase(),
        )),
    }
}

/// Binds `0.0.0.0:port` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
