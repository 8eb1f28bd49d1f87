//! Local HTTP service.
//!
//! Mutations of one project go through its writer lock one at a time and
//! bump the project revision by one. A mutation may carry `base_revision`;
//! if that is not the current revision the request fails with 409, as does
//! any mutation while a long job runs on the project. Long work (training,
//! deep-feature extraction) is accepted with 202 and a job id and runs on
//! a bounded pool against a copy of the project, so reads stay available.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use featseg_core::deep::formats::decode_fts;
use featseg_core::deep::{visualize_pca_rgb, LowResFeatures, WeightArchive};
use featseg_core::engine::{decode_image, encode_rgb_png, RleRecord};
use featseg_core::{ClassifierKind, Error, FeatureSetConfig, Project, SparseLabelMap};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::config::Config;
use crate::deep::{cache_for, extract_with_sidecar, to_full_resolution, DeepRequest};
use crate::store::{ProjectSettings, ProjectStore, StoredProject};

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Image(_) | Error::Format { .. } => ApiError::BadRequest(e.to_string()),
            Error::Shape(_) | Error::Argument(_) | Error::State(_) | Error::UnsupportedKind(_) | Error::Provider(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            Error::Io(_) | Error::Json(_) | Error::Archive(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => ApiError::Internal(format!("{e:#}")),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

const QUEUED: u8 = 0;
const RUNNING: u8 = 1;
const DONE: u8 = 2;
const FAILED: u8 = 3;

/// A long-running job. Status reads take no locks.
pub struct Job {
    id: u64,
    kind: &'static str,
    project: String,
    state: AtomicU8,
    outcome: OnceLock<Value>,
}

impl Job {
    fn to_json(&self) -> Value {
        let state = self.state.load(Ordering::Acquire);
        let name = ["queued", "running", "done", "failed"][state as usize];
        let mut v = json!({"id": self.id, "kind": self.kind, "project": self.project, "state": name});
        match (state, self.outcome.get()) {
            (DONE, Some(r)) => v["result"] = r.clone(),
            (FAILED, Some(e)) => v["error"] = e.clone(),
            _ => {}
        }
        v
    }

    fn finish(&self, outcome: Result<Value, String>) {
        let (state, value) = match outcome {
            Ok(v) => (DONE, v),
            Err(e) => (FAILED, Value::String(e)),
        };
        let _ = self.outcome.set(value);
        self.state.store(state, Ordering::Release);
    }
}

struct Slot {
    writer: tokio::sync::Mutex<()>,
    busy: AtomicBool,
    state: RwLock<StoredProject>,
}

pub struct AppState {
    store: ProjectStore,
    config: Config,
    weights: Option<Arc<WeightArchive>>,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    jobs: RwLock<HashMap<u64, Arc<Job>>>,
    next_job: AtomicU64,
    pool: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: ProjectStore, config: Config) -> anyhow::Result<Arc<Self>> {
        let weights = crate::deep::load_weights(config.extractor.weights.as_deref())?.map(Arc::new);
        Ok(Arc::new(Self {
            store,
            weights,
            slots: Mutex::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            pool: Arc::new(Semaphore::new(config.server.workers.max(1))),
            config,
        }))
    }

    pub fn store(&self) -> &ProjectStore {
        &self.store
    }

    async fn slot(self: &Arc<Self>, id: &str) -> ApiResult<Arc<Slot>> {
        if let Some(s) = self.slots.lock().unwrap().get(id) {
            return Ok(s.clone());
        }
        if !self.store.contains(id) {
            return Err(ApiError::NotFound(format!("no project {id:?}")));
        }
        let st = self.clone();
        let owned = id.to_string();
        let sp = blocking(move || st.store.load(&owned).map_err(ApiError::from)).await?;
        let slot = Arc::new(Slot {
            writer: tokio::sync::Mutex::new(()),
            busy: AtomicBool::new(false),
            state: RwLock::new(sp),
        });
        Ok(self.slots.lock().unwrap().entry(id.to_string()).or_insert(slot).clone())
    }

    fn new_job(&self, kind: &'static str, project: &str) -> Arc<Job> {
        let id = self.next_job.fetch_add(1, Ordering::Relaxed);
        let job = Arc::new(Job {
            id,
            kind,
            project: project.to_string(),
            state: AtomicU8::new(QUEUED),
            outcome: OnceLock::new(),
        });
        self.jobs.write().unwrap().insert(id, job.clone());
        job
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

fn parse_json<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed JSON body: {e}")))
}

fn check_writable(slot: &Slot, base_revision: Option<u64>) -> ApiResult<()> {
    if slot.busy.load(Ordering::Acquire) {
        return Err(ApiError::Conflict("project is busy with a running job".into()));
    }
    let current = slot.state.read().unwrap().revision;
    match base_revision {
        Some(b) if b != current => Err(ApiError::Conflict(format!(
            "stale revision {b}; project is at revision {current}"
        ))),
        _ => Ok(()),
    }
}

fn need_image(sp: &StoredProject) -> ApiResult<&Project> {
    sp.project
        .as_ref()
        .ok_or_else(|| ApiError::Unprocessable("project has no image; upload one first".into()))
}

/// Applies a quick mutation under the writer lock and persists it.
async fn mutate<F>(st: &Arc<AppState>, id: &str, base_revision: Option<u64>, f: F) -> ApiResult<Json<Value>>
where
    F: FnOnce(&mut StoredProject) -> ApiResult<Value> + Send + 'static,
{
    let slot = st.slot(id).await?;
    let _writer = slot.writer.lock().await;
    check_writable(&slot, base_revision)?;
    let st = st.clone();
    let slot = slot.clone();
    let v = blocking(move || {
        let mut sp = slot.state.write().unwrap();
        let mut v = f(&mut sp)?;
        sp.revision += 1;
        st.store.save(&sp)?;
        v["revision"] = json!(sp.revision);
        Ok(v)
    })
    .await?;
    Ok(Json(v))
}

/// Accepts a long job under the writer lock. `work` runs on a copy of the
/// project which replaces the original on success.
async fn start_job<F>(
    st: &Arc<AppState>,
    id: &str,
    base_revision: Option<u64>,
    kind: &'static str,
    precheck: impl FnOnce(&Project) -> ApiResult<()>,
    work: F,
) -> ApiResult<Response>
where
    F: FnOnce(&mut Project) -> featseg_core::Result<Value> + Send + 'static,
{
    let slot = st.slot(id).await?;
    let _writer = slot.writer.lock().await;
    check_writable(&slot, base_revision)?;
    let revision = {
        let mut sp = slot.state.write().unwrap();
        precheck(need_image(&sp)?)?;
        sp.revision += 1;
        sp.revision
    };
    slot.busy.store(true, Ordering::Release);
    let job = st.new_job(kind, id);
    let job_id = job.id;
    let (st2, slot2) = (st.clone(), slot.clone());
    tokio::spawn(async move {
        let _permit = st2.pool.clone().acquire_owned().await;
        job.state.store(RUNNING, Ordering::Release);
        let slot3 = slot2.clone();
        let outcome = tokio::task::spawn_blocking(move || -> anyhow::Result<Value> {
            let mut draft = slot3.state.read().unwrap().project.clone().expect("checked at acceptance");
            let mut v = work(&mut draft)?;
            let mut sp = slot3.state.write().unwrap();
            sp.project = Some(draft);
            st2.store.save(&sp)?;
            v["revision"] = json!(sp.revision);
            Ok(v)
        })
        .await;
        let outcome = match outcome {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(e) => Err(format!("job panicked: {e}")),
        };
        if let Err(e) = &outcome {
            log::warn!("job {} ({}) failed: {e}", job.id, job.kind);
        }
        slot2.busy.store(false, Ordering::Release);
        job.finish(outcome);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"job_id": job_id, "revision": revision})),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateRequest {
    class_count: usize,
    class_names: Vec<String>,
    feature_config: Option<FeatureSetConfig>,
}

impl Default for CreateRequest {
    fn default() -> Self {
        Self {
            class_count: 2,
            class_names: Vec::new(),
            feature_config: None,
        }
    }
}

async fn create_project(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse_json(&body)?;
    if !(1..=255).contains(&req.class_count) {
        return Err(ApiError::Unprocessable(format!("class_count {} outside 1..=255", req.class_count)));
    }
    if !req.class_names.is_empty() && req.class_names.len() != req.class_count {
        return Err(ApiError::Unprocessable("class_names must name every class".into()));
    }
    let feature_config = req.feature_config.unwrap_or_else(|| st.config.features.clone());
    feature_config.validate()?;
    let settings = ProjectSettings {
        class_count: req.class_count,
        class_names: req.class_names,
        feature_config,
    };
    let st2 = st.clone();
    let sp = blocking(move || st2.store.create(settings).map_err(ApiError::from)).await?;
    let body = json!({"id": sp.id, "revision": sp.revision});
    st.slots.lock().unwrap().insert(
        sp.id.clone(),
        Arc::new(Slot {
            writer: tokio::sync::Mutex::new(()),
            busy: AtomicBool::new(false),
            state: RwLock::new(sp),
        }),
    );
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn list_projects(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "projects": st.store.ids() }))
}

fn summary(sp: &StoredProject, busy: bool) -> Value {
    let p = sp.project.as_ref();
    json!({
        "id": sp.id,
        "revision": sp.revision,
        "busy": busy,
        "class_count": sp.settings.class_count,
        "class_names": sp.settings.class_names,
        "dims": p.map(|p| [p.dims().0, p.dims().1]),
        "image_hash": p.map(|p| p.image_hash()),
        "deep": p.and_then(|p| p.deep()).map(|d| &d.key),
        "classical_channels": sp.settings.feature_config.channel_count(),
        "has_model": p.is_some_and(|p| p.trained().is_some()),
    })
}

async fn get_project(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = st.slot(&id).await?;
    let busy = slot.busy.load(Ordering::Acquire);
    let sp = slot.state.read().unwrap();
    Ok(Json(summary(&sp, busy)))
}

#[derive(Debug, Default, Deserialize)]
struct RevisionQuery {
    base_revision: Option<u64>,
}

async fn upload_image(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RevisionQuery>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let image = blocking(move || decode_image(&body).map_err(ApiError::from)).await?;
    mutate(&st, &id, q.base_revision, move |sp| {
        match &mut sp.project {
            Some(p) => p.set_image(image)?,
            None => {
                let mut p = Project::new(image, sp.settings.feature_config.clone(), sp.settings.class_count)?;
                if !sp.settings.class_names.is_empty() {
                    let mut labels = p.labels().clone();
                    labels.class_names = sp.settings.class_names.clone();
                    p.set_labels(labels)?;
                }
                sp.project = Some(p);
            }
        }
        let (h, w) = sp.project.as_ref().expect("set above").dims();
        Ok(json!({"height": h, "width": w}))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LabelsRequest {
    records: Vec<RleRecord>,
    base_revision: Option<u64>,
}

async fn put_labels(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: LabelsRequest = parse_json(&body)?;
    mutate(&st, &id, req.base_revision, move |sp| {
        let names = sp.settings.class_names.clone();
        let p = sp
            .project
            .as_mut()
            .ok_or_else(|| ApiError::Unprocessable("project has no image; upload one first".into()))?;
        let (h, w) = p.dims();
        let mut labels = SparseLabelMap::from_rle(h, w, p.class_count(), &req.records)?;
        if !names.is_empty() {
            labels.class_names = names;
        }
        let counts = labels.class_counts();
        p.set_labels(labels)?;
        Ok(json!({"class_counts": counts}))
    })
    .await
}

async fn get_labels(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = st.slot(&id).await?;
    let sp = slot.state.read().unwrap();
    let p = need_image(&sp)?;
    Ok(Json(json!({
        "revision": sp.revision,
        "height": p.dims().0,
        "width": p.dims().1,
        "class_count": p.class_count(),
        "records": p.labels().to_rle(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    kind: ClassifierKind,
    #[serde(default)]
    use_deep: bool,
    #[serde(default)]
    j: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    base_revision: Option<u64>,
}

async fn train(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::BadRequest("train needs a JSON body with at least \"kind\"".into()));
    }
    let req: TrainRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed JSON body: {e}")))?;
    let mut cfg = st.config.train.clone();
    if let Some(seed) = req.seed {
        cfg = cfg.with_seed(seed);
    }
    let TrainRequest { kind, use_deep, j, .. } = req;
    start_job(
        &st,
        &id,
        req.base_revision,
        "train",
        |p| {
            if kind == ClassifierKind::Mlp {
                return Err(Error::UnsupportedKind("mlp is not available in this build".into()).into());
            }
            let used = p.labels().class_counts().iter().filter(|&&c| c > 0).count();
            if used < 2 {
                return Err(ApiError::Unprocessable(format!(
                    "labels cover {used} class(es); draw labels for at least two classes before training"
                )));
            }
            p.feature_hash(use_deep, j)?;
            Ok(())
        },
        move |p| {
            let (_, metrics) = p.train_on_labels(kind, &cfg, use_deep, j)?;
            Ok(json!({ "metrics": metrics }))
        },
    )
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SidecarRequest {
    k: Option<usize>,
    flip_symmetrized: bool,
    base_revision: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct AttachQuery {
    extractor_id: Option<String>,
    flip_symmetrized: bool,
    k: Option<usize>,
    base_revision: Option<u64>,
}

/// JSON body: run the configured sidecar. Any other body: an FTS1 file,
/// either full resolution or a patch grid for the configured upsampler.
async fn deep_features(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<AttachQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let weights = st.weights.clone();
    if is_json {
        let req: SidecarRequest = parse_json(&body)?;
        if st.config.extractor.command.is_empty() {
            return Err(ApiError::Unprocessable(
                "no extractor command configured; attach an FTS1 file instead".into(),
            ));
        }
        let extractor = st.config.extractor.clone();
        let dreq = DeepRequest {
            k: req.k,
            flip_symmetrized: req.flip_symmetrized,
        };
        return start_job(&st, &id, req.base_revision, "deep-features", |_| Ok(()), move |p| {
            let cache = extract_with_sidecar(p, &extractor, weights.as_deref(), &dreq)?;
            let k = cache.key.k;
            p.attach_deep(cache)?;
            Ok(json!({ "k": k }))
        })
        .await;
    }
    let file = blocking(move || decode_fts(&body).map_err(ApiError::from)).await?;
    let lr = LowResFeatures::from_file(file)?;
    let extractor_id = q.extractor_id.unwrap_or_else(|| "upload".into());
    start_job(&st, &id, q.base_revision, "deep-features", |_| Ok(()), move |p| {
        let stack = to_full_resolution(p.image(), lr, q.k, weights.as_deref())?;
        let cache = cache_for(p, extractor_id, q.flip_symmetrized, stack)?;
        let k = cache.key.k;
        p.attach_deep(cache)?;
        Ok(json!({ "k": k }))
    })
    .await
}

/// Runs `f` on the project, computing the classical cache first if needed.
fn with_classical<T>(slot: &Slot, f: impl Fn(&Project) -> ApiResult<T>) -> ApiResult<T> {
    {
        let sp = slot.state.read().unwrap();
        let p = need_image(&sp)?;
        if p.classical_is_current() {
            return f(p);
        }
    }
    let mut sp = slot.state.write().unwrap();
    let p = sp
        .project
        .as_mut()
        .ok_or_else(|| ApiError::Unprocessable("project has no image; upload one first".into()))?;
    p.ensure_classical()?;
    f(p)
}

fn png_response(png: Vec<u8>, revision: u64) -> Response {
    (
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-featseg-revision"), revision.to_string()),
        ],
        png,
    )
        .into_response()
}

async fn segmentation(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = st.slot(&id).await?;
    blocking(move || {
        {
            let sp = slot.state.read().unwrap();
            if need_image(&sp)?.trained().is_none() {
                return Err(ApiError::Unprocessable("no trained classifier; train on labels first".into()));
            }
        }
        with_classical(&slot, |p| {
            let png = p.segment_cached()?.to_png()?;
            Ok(png)
        })
        .map(|png| png_response(png, slot.state.read().unwrap().revision))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct VizQuery {
    source: Option<String>,
}

async fn feature_viz(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<VizQuery>,
) -> ApiResult<Response> {
    let slot = st.slot(&id).await?;
    blocking(move || {
        let source = match q.source.as_deref() {
            None => {
                let sp = slot.state.read().unwrap();
                if need_image(&sp)?.deep().is_some() {
                    "deep"
                } else {
                    "classical"
                }
            }
            Some("deep") => "deep",
            Some("classical") => "classical",
            Some(other) => return Err(ApiError::BadRequest(format!("unknown source {other:?}"))),
        };
        let png = if source == "deep" {
            let sp = slot.state.read().unwrap();
            let deep = need_image(&sp)?
                .deep()
                .ok_or_else(|| ApiError::NotFound("no deep features; extract features first".into()))?;
            encode_rgb_png(&visualize_pca_rgb(&deep.stack)?)?
        } else {
            with_classical(&slot, |p| {
                let stack = p.classical_cached().expect("ensured");
                Ok(encode_rgb_png(&visualize_pca_rgb(stack)?)?)
            })?
        };
        Ok(png_response(png, slot.state.read().unwrap().revision))
    })
    .await
}

async fn metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = st.slot(&id).await?;
    let busy = slot.busy.load(Ordering::Acquire);
    let sp = slot.state.read().unwrap();
    let p = sp.project.as_ref();
    Ok(Json(json!({
        "revision": sp.revision,
        "busy": busy,
        "class_counts": p.map(|p| p.labels().class_counts()),
        "labelled": p.map(|p| p.labels().labelled_count()),
        "has_model": p.is_some_and(|p| p.trained().is_some()),
        "last": p.and_then(|p| p.history().last()).map(|h| &h.metrics),
        "history": p.map(|p| p.history()).unwrap_or_default(),
    })))
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    let job = st.jobs.read().unwrap().get(&id).cloned();
    job.map(|j| Json(j.to_json()))
        .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/image", post(upload_image))
        .route("/projects/{id}/deep-features", post(deep_features))
        .route("/projects/{id}/labels", get(get_labels).put(put_labels))
        .route("/projects/{id}/train", post(train))
        .route("/projects/{id}/segmentation", get(segmentation))
        .route("/projects/{id}/feature-viz", get(feature_viz))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
