//! HTTP service over one run: a frozen bank and its model, swapped whole on
//! reload.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use latent_directions::edit::{EditSet, EditSpec, TimeWindow};
use latent_directions::error::Error;
use latent_directions::schedule::LatentState;

use crate::artifacts::{image_from_bytes, Loaded, RunDir};
use crate::commands::diversity_for;
use crate::wire::{
    DirectionDetail, DirectionSummary, EditRequest, EditResponse, ErrorBody, ErrorDetail, Health,
    Source, StepMetric, StripImage, StripRef, UploadResponse,
};

/// Largest accepted upload, in bytes.
pub const MAX_UPLOAD_BYTES: usize = 8 << 20;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    path: Option<String>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            path: None,
            message: message.into(),
        }
    }

    fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: Some(path.into()),
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
        }
    }

    fn not_found(path: Option<String>, message: impl Into<String>) -> Self {
        Self {
            path,
            ..Self::new(StatusCode::NOT_FOUND, "not_found", message)
        }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "artifacts are being reloaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::DegenerateInput(_) | Error::Ingestion(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string())
            }
            Error::MissingArtifact(_) => Self::not_found(None, e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                kind: self.kind.into(),
                path: self.path,
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Loaded artifacts plus what the listing endpoints need precomputed.
pub struct Snapshot {
    pub loaded: Loaded,
    pub self_consistency: Vec<f64>,
}

impl Snapshot {
    pub fn open(run: &RunDir) -> latent_directions::Result<Self> {
        let loaded = Loaded::open(run, None)?;
        let self_consistency = diversity_for(&loaded, run)?.self_consistency;
        Ok(Self {
            loaded,
            self_consistency,
        })
    }
}

/// Content-addressed upload directory; entries expire `ttl` after their
/// last write.
pub struct UploadStore {
    dir: PathBuf,
    ttl: Duration,
}

impl UploadStore {
    pub fn new(dir: PathBuf, ttl: Duration) -> std::io::Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, ttl })
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        let valid = id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase());
        valid.then(|| self.dir.join(id))
    }

    pub fn evict_expired(&self) -> std::io::Result<usize> {
        let now = SystemTime::now();
        let mut removed = 0;
        for entry in std::fs::read_dir(&self.dir)? {
            let entry = entry?;
            let modified = entry.metadata()?.modified()?;
            if now.duration_since(modified).unwrap_or_default() > self.ttl {
                std::fs::remove_file(entry.path())?;
                removed += 1;
            }
        }
        Ok(removed)
    }

    pub fn put(&self, id: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.path(id).expect("ids are sha256 hex");
        let tmp = self.dir.join(format!(".{id}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)
    }

    pub fn get(&self, id: &str) -> Option<Vec<u8>> {
        let path = self.path(id)?;
        let fresh = std::fs::metadata(&path)
            .and_then(|m| m.modified())
            .ok()
            .and_then(|m| SystemTime::now().duration_since(m).ok())
            .is_some_and(|age| age <= self.ttl);
        if fresh {
            std::fs::read(path).ok()
        } else {
            None
        }
    }
}

/// Shared service state. Requests clone the current snapshot's `Arc`, so a
/// reload never exposes half-loaded artifacts.
pub struct AppState {
    run: RunDir,
    current: RwLock<Arc<Snapshot>>,
    reloading: AtomicBool,
    uploads: UploadStore,
}

/// Marks the service as reloading until dropped.
pub struct ReloadGuard<'a>(&'a AtomicBool);

impl Drop for ReloadGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl AppState {
    pub fn new(run: RunDir, snapshot: Snapshot, uploads: UploadStore) -> Self {
        Self {
            run,
            current: RwLock::new(Arc::new(snapshot)),
            reloading: AtomicBool::new(false),
            uploads,
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("state lock").clone()
    }

    /// `None` when a reload is already running.
    pub fn begin_reload(&self) -> Option<ReloadGuard<'_>> {
        self.reloading
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| ReloadGuard(&self.reloading))
    }

    fn available(&self) -> ApiResult<Arc<Snapshot>> {
        if self.reloading.load(Ordering::SeqCst) {
            return Err(ApiError::unavailable());
        }
        Ok(self.snapshot())
    }

    /// Loads the run directory again and swaps it in.
    pub fn reload(&self) -> latent_directions::Result<()> {
        let fresh = Snapshot::open(&self.run)?;
        *self.current.write().expect("state lock") = Arc::new(fresh);
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/directions", get(list_directions))
        .route("/directions/{id}", get(direction_detail))
        .route("/directions/{id}/strip/{index}", get(strip_image))
        .route("/edit", post(edit))
        .route("/upload", post(upload))
        .route("/manifest", get(manifest))
        .route("/reload", post(reload))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn health_of(snap: &Snapshot) -> Health {
    let l = &snap.loaded;
    Health {
        status: "ok".into(),
        directions: l.bank.len(),
        schedule_id: l.schedule.id(),
        model_checksum: l.model_checksum.clone(),
        bank_sha256: l.bank_sha256.clone(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult<Json<Health>> {
    let snap = state.available()?;
    Ok(Json(health_of(&snap)))
}

fn summary(snap: &Snapshot, id: usize) -> DirectionSummary {
    let scales = &snap.loaded.config.edit.strip_scales;
    DirectionSummary {
        id,
        label: None,
        self_consistency: snap.self_consistency[id],
        strip: scales
            .iter()
            .enumerate()
            .map(|(i, &scale)| StripRef {
                scale,
                url: format!("/directions/{id}/strip/{i}"),
            })
            .collect(),
    }
}

async fn list_directions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<DirectionSummary>>> {
    let snap = state.available()?;
    Ok(Json((0..snap.loaded.bank.len()).map(|k| summary(&snap, k)).collect()))
}

fn parse_id(snap: &Snapshot, raw: &str) -> ApiResult<usize> {
    raw.parse::<usize>()
        .ok()
        .filter(|&k| k < snap.loaded.bank.len())
        .ok_or_else(|| ApiError::not_found(Some("id".into()), format!("no direction `{raw}`")))
}

/// Strip thumbnails start from the first evaluation seed.
fn strip_seed(snap: &Snapshot) -> u64 {
    snap.loaded.config.eval.eval_seed_start
}

fn strip_entry(snap: &Snapshot, id: usize, scale: f64) -> ApiResult<StripImage> {
    let source = Source::Seed { seed: strip_seed(snap) };
    let edits = EditSet::single(EditSpec::new(id, scale, TimeWindow::FULL));
    let rendered = snap.loaded.render(&source, &edits, None)?;
    Ok(StripImage {
        scale,
        image_png: BASE64.encode(&rendered.png),
        sidecar: rendered.sidecar,
    })
}

async fn direction_detail(
    State(state): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
) -> ApiResult<Json<DirectionDetail>> {
    let snap = state.available()?;
    let id = parse_id(&snap, &raw)?;
    blocking(move || {
        let strip = snap
            .loaded
            .config
            .edit
            .strip_scales
            .iter()
            .map(|&s| strip_entry(&snap, id, s))
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(Json(DirectionDetail {
            summary: summary(&snap, id),
            strip,
        }))
    })
    .await
}

async fn strip_image(
    State(state): State<Arc<AppState>>,
    UrlPath((raw, index)): UrlPath<(String, String)>,
) -> ApiResult<Json<StripImage>> {
    let snap = state.available()?;
    let id = parse_id(&snap, &raw)?;
    let scales = &snap.loaded.config.edit.strip_scales;
    let scale = index
        .parse::<usize>()
        .ok()
        .and_then(|i| scales.get(i).copied())
        .ok_or_else(|| ApiError::not_found(Some("index".into()), format!("no strip entry `{index}`")))?;
    blocking(move || strip_entry(&snap, id, scale).map(Json)).await
}

/// Parses a JSON body, reporting the dotted path of the first bad field.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::validation(path, e.into_inner().to_string())
    })
}

fn check_request(snap: &Snapshot, req: &EditRequest) -> ApiResult<EditSet> {
    let k = snap.loaded.bank.len();
    for (i, e) in req.edits.iter().enumerate() {
        if e.direction_id >= k {
            return Err(ApiError::not_found(
                Some(format!("edits[{i}].direction_id")),
                format!("no direction {} (bank has {k})", e.direction_id),
            ));
        }
        if !e.scale.is_finite() {
            return Err(ApiError::validation(format!("edits[{i}].scale"), "scale must be finite"));
        }
        let w = e.window.resolve(&snap.loaded.config.edit);
        if let Err(err) = w.validate() {
            return Err(ApiError::validation(format!("edits[{i}].window"), err.to_string()));
        }
    }
    Ok(req.edit_set(&snap.loaded.config.edit))
}

/// Renders one edit request against a snapshot.
pub fn render_request(
    snap: &Snapshot,
    uploads: &UploadStore,
    req: &EditRequest,
) -> ApiResult<EditResponse> {
    let edits = check_request(snap, req)?;
    let image: Option<LatentState> = match &req.source {
        Source::Seed { .. } => None,
        Source::Image { image_id } => {
            let bytes = uploads.get(image_id).ok_or_else(|| {
                ApiError::not_found(Some("source.image_id".into()), format!("no uploaded image {image_id}"))
            })?;
            Some(image_from_bytes(&bytes, &snap.loaded.config)?.0)
        }
    };
    let rendered = snap.loaded.render(&req.source, &edits, image.as_ref())?;
    Ok(EditResponse {
        image_png: BASE64.encode(&rendered.png),
        sidecar: rendered.sidecar,
        metrics: req.metrics.then(|| {
            rendered
                .diagnostics
                .iter()
                .map(|d| StepMetric {
                    t: d.t,
                    edit_norm: d.edit_norm,
                })
                .collect()
        }),
    })
}

fn body_bytes(body: std::result::Result<Bytes, BytesRejection>) -> ApiResult<Bytes> {
    body.map_err(|r| {
        let status = r.status();
        let kind = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "payload_too_large"
        } else {
            "validation"
        };
        ApiError::new(status, kind, r.body_text())
    })
}

async fn edit(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> ApiResult<Json<EditResponse>> {
    let req: EditRequest = parse_body(&body_bytes(body)?)?;
    let snap = state.available()?;
    blocking(move || render_request(&snap, &state.uploads, &req).map(Json)).await
}

async fn upload(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Bytes, BytesRejection>,
) -> ApiResult<Json<UploadResponse>> {
    let body = body_bytes(body)?;
    let snap = state.available()?;
    blocking(move || {
        let (_, id) = image_from_bytes(&body, &snap.loaded.config)?;
        let io = |e: std::io::Error| ApiError::from(Error::Io(e));
        state.uploads.evict_expired().map_err(io)?;
        state.uploads.put(&id, &body).map_err(io)?;
        Ok(Json(UploadResponse { image_id: id }))
    })
    .await
}

async fn manifest(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    state.available()?;
    let path = state.run.manifest("discover");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| ApiError::not_found(None, format!("missing artifact: {}", path.display())))?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<Json<Health>> {
    blocking(move || {
        let _guard = state.begin_reload().ok_or_else(ApiError::unavailable)?;
        state.reload()?;
        Ok(Json(health_of(&state.snapshot())))
    })
    .await
}

/// Loads `run`, then serves until interrupted.
pub async fn serve(run: RunDir, addr: &str, upload_dir: &Path, ttl: Duration) -> latent_directions::Result<()> {
    let snap = {
        let run = run.clone();
        tokio::task::spawn_blocking(move || Snapshot::open(&run))
            .await
            .expect("loader panicked")?
    };
    let uploads = UploadStore::new(upload_dir.to_path_buf(), ttl)?;
    let state = Arc::new(AppState::new(run, snap, uploads));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
