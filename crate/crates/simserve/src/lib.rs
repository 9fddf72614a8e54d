//! Interactive inference service.
//!
//! HTTP JSON:
//! - `POST /sessions` creates a surrogate or FEM session and returns its id;
//! - `GET /sessions/{id}` reports engine, window length and running stats;
//! - `GET /sessions/{id}/mesh` returns the topology for rendering;
//! - `POST /sessions/{id}/step` advances one frame (same body as the stream);
//! - `DELETE /sessions/{id}` drops the session.
//!
//! WebSocket `/sessions/{id}/stream` carries newline-delimited JSON: the
//! client sends `{"forces":[{"node":[i,j,k],"f":[fx,fy,fz]}]}` (N) and receives
//! `{"u":[...],"dv":x,"latency":s}` (mm, mm³, s) per frame, or `{"error":msg}`.
//!
//! Steps on one session are serialized in arrival order (FIFO lock);
//! different sessions run concurrently on the blocking pool.

pub mod session;

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use viscosurr_core::femsim::{Material, ScenarioConfig};
use viscosurr_core::meshkit::{build_box_mesh, FixedSpec, GridMesh};
use viscosurr_core::store::load_checkpoint;
use viscosurr_core::surrogate::ModelInstance;

pub use session::{ForceFrame, MeshInfo, NodeForce, Session, SessionStats, StepResponse};

/// Error carried to clients as `{"error": message}` with an HTTP status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct ServeError {
    pub status: u16,
    pub message: String,
}

impl ServeError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ServeError { status: status.as_u16(), message: message.into() }
    }

    pub fn bad_request(e: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.to_string())
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    pub fn conflict(e: impl ToString) -> Self {
        Self::new(StatusCode::CONFLICT, e.to_string())
    }

    pub fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Surrogate,
    Fem,
}

/// Material by preset name or by explicit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaterialChoice {
    Preset(String),
    Params(Material),
}

impl MaterialChoice {
    pub fn resolve(&self) -> Result<Material, ServeError> {
        match self {
            MaterialChoice::Preset(name) => match name.as_str() {
                "paper" => Ok(Material::paper()),
                "desk" => Ok(Material::desk()),
                other => Err(ServeError::bad_request(format!("unknown material preset {other:?} (paper, desk)"))),
            },
            MaterialChoice::Params(m) => Ok(m.clone()),
        }
    }
}

/// `POST /sessions` body; every field falls back to the server defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub engine: Option<EngineKind>,
    /// Surrogate checkpoint path.
    pub checkpoint: Option<PathBuf>,
    /// Expected grid; a checkpoint built for other dims is rejected.
    pub dims: Option<[usize; 3]>,
    /// FEM node spacing (mm).
    pub spacing: Option<[f64; 3]>,
    pub material: Option<MaterialChoice>,
    /// FEM time advanced per step (s).
    pub sample_interval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub engine: String,
    pub dims: [usize; 3],
    /// Force frames the engine sees per step.
    pub window: usize,
    pub schema_tag: String,
    pub stats: SessionStats,
    pub failed: Option<String>,
}

/// Defaults applied to session requests.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub default_engine: EngineKind,
    pub checkpoint: Option<PathBuf>,
    /// Grid for FEM sessions that name no dims (else the checkpoint's, else 17×17×8).
    pub fem_mesh: Option<GridMesh>,
    pub material: Material,
    pub scenario: ScenarioConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            default_engine: EngineKind::Surrogate,
            checkpoint: None,
            fem_mesh: None,
            material: Material::paper(),
            scenario: ScenarioConfig::default(),
        }
    }
}

type SharedSession = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    config: ServerConfig,
    sessions: RwLock<HashMap<String, SharedSession>>,
    models: Mutex<HashMap<PathBuf, Arc<ModelInstance>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            config,
            sessions: RwLock::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session table poisoned").len()
    }

    fn session(&self, id: &str) -> Result<SharedSession, ServeError> {
        self.sessions.read().expect("session table poisoned").get(id).cloned().ok_or_else(|| ServeError::not_found(id))
    }

    /// Loads (once) and shares a checkpoint's frozen model.
    pub fn model(&self, path: &FsPath) -> Result<Arc<ModelInstance>, ServeError> {
        let key = path.canonicalize().map_err(|e| ServeError::bad_request(format!("checkpoint {}: {e}", path.display())))?;
        if let Some(m) = self.models.lock().expect("model cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let ckpt = load_checkpoint(&key, None).map_err(|e| ServeError::bad_request(format!("checkpoint {}: {e}", path.display())))?;
        let model = Arc::new(ckpt.model);
        self.models.lock().expect("model cache poisoned").insert(key, model.clone());
        Ok(model)
    }

    /// Builds a session from a request (blocking: may load a checkpoint).
    pub fn build_session(&self, req: &CreateSession) -> Result<Session, ServeError> {
        let engine = req.engine.unwrap_or(self.config.default_engine);
        match engine {
            EngineKind::Surrogate => {
                let path = req.checkpoint.as_ref().or(self.config.checkpoint.as_ref()).ok_or_else(|| {
                    ServeError::bad_request("surrogate session needs a checkpoint (none given, no server default)")
                })?;
                let model = self.model(path)?;
                if let Some(dims) = req.dims {
                    if dims != model.spec.dims {
                        return Err(ServeError::bad_request(format!(
                            "checkpoint {} was built for a {:?} grid, session requested {dims:?}",
                            path.display(),
                            model.spec.dims
                        )));
                    }
                }
                Ok(Session::surrogate(model))
            }
            EngineKind::Fem => {
                let mesh = match (req.dims, &self.config.fem_mesh) {
                    (Some(dims), _) => build_box_mesh(dims, req.spacing.unwrap_or([1.0; 3]), FixedSpec::PaperDefault)
                        .map_err(ServeError::bad_request)?,
                    (None, Some(m)) => m.clone(),
                    (None, None) => match &self.config.checkpoint {
                        Some(p) => self.model(p)?.mesh().clone(),
                        None => build_box_mesh([17, 17, 8], [1.0; 3], FixedSpec::PaperDefault)
                            .map_err(ServeError::internal)?,
                    },
                };
                let material = match &req.material {
                    Some(m) => m.resolve()?,
                    None => self.config.material.clone(),
                };
                let mut scenario = self.config.scenario.clone();
                if let Some(dt) = req.sample_interval {
                    if !(dt.is_finite() && dt > 0.0) {
                        return Err(ServeError::bad_request(format!("sample_interval must be positive, got {dt}")));
                    }
                    scenario.sample_interval = dt;
                }
                Session::fem(mesh, &material, &scenario)
            }
        }
    }

    pub fn insert(&self, session: Session) -> String {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        id
    }

    /// Runs one step; concurrent callers on the same session queue in order.
    pub async fn step(&self, id: &str, frame: ForceFrame) -> Result<StepResponse, ServeError> {
        let session = self.session(id)?;
        let mut guard = session.lock_owned().await;
        tokio::task::spawn_blocking(move || guard.step(&frame)).await.map_err(ServeError::internal)?
    }

    async fn info(&self, id: &str) -> Result<SessionInfo, ServeError> {
        let session = self.session(id)?;
        let s = session.lock().await;
        Ok(SessionInfo {
            id: id.to_string(),
            engine: s.engine().name().to_string(),
            dims: s.mesh().dims(),
            window: s.window_len(),
            schema_tag: s.mesh().schema_tag(),
            stats: s.stats().clone(),
            failed: s.failure().map(str::to_string),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/mesh", get(session_mesh))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/stream", get(stream_session))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// JSON body parsing with errors in the service's own `{"error": ...}` shape.
fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &[u8]) -> Result<T, ServeError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServeError::bad_request(format!("malformed request body: {e}")))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionInfo>), ServeError> {
    let req: CreateSession = parse_body(&body)?;
    let builder = state.clone();
    let session = tokio::task::spawn_blocking(move || builder.build_session(&req)).await.map_err(ServeError::internal)??;
    let id = state.insert(session);
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(state.info(&id).await?)))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ServeError> {
    Ok(Json(state.info(&id).await?))
}

async fn session_mesh(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<MeshInfo>, ServeError> {
    let session = state.session(&id)?;
    let mesh = session.lock().await.mesh().clone();
    Ok(Json(MeshInfo::of(&mesh)))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ServeError> {
    match state.sessions.write().expect("session table poisoned").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ServeError::not_found(&id)),
    }
}

async fn step_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<StepResponse>, ServeError> {
    let frame: ForceFrame = parse_body(&body)?;
    Ok(Json(state.step(&id, frame).await?))
}

async fn stream_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServeError> {
    state.session(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_loop(socket, state, id)))
}

fn error_line(msg: impl ToString) -> String {
    let mut s = json!({ "error": msg.to_string() }).to_string();
    s.push('\n');
    s
}

async fn stream_loop(mut socket: WebSocket, state: Arc<AppState>, id: String) {
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(t) => t,
                Err(_) => {
                    if socket.send(Message::text(error_line("binary frames must be UTF-8 JSON"))).await.is_err() {
                        return;
                    }
                    continue;
                }
            },
            Message::Close(_) => return,
            _ => continue,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let reply = match serde_json::from_str::<ForceFrame>(line) {
                Err(e) => error_line(format!("malformed frame: {e}")),
                Ok(frame) => match state.step(&id, frame).await {
                    Ok(r) => {
                        let mut s = serde_json::to_string(&r).expect("response serializes");
                        s.push('\n');
                        s
                    }
                    Err(e) if e.status == StatusCode::NOT_FOUND.as_u16() => {
                        let _ = socket.send(Message::text(error_line(e))).await;
                        let _ = socket.send(Message::Close(None)).await;
                        return;
                    }
                    Err(e) => error_line(e),
                },
            };
            if socket.send(Message::text(reply)).await.is_err() {
                return;
            }
        }
    }
}
