//! HTTP session service for human and agent play.
//!
//! Sessions live in memory. With a checkpoint directory configured, every
//! session is also written through to `{dir}/{session_id}.jsonl` in the
//! trial-log format used for experiment runs, and [`AppState::recover`]
//! rebuilds sessions from those files on start-up.
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | POST | `/api/sessions` | `{mode, graph?, seed?}` | `{session_id}` |
//! | GET | `/api/sessions/{id}` | | `{inventory, trials, discoveries, ...}` |
//! | POST | `/api/sessions/{id}/combine` | `{a, b}` | trial record |
//! | GET | `/api/sessions/{id}/history` | `offset`, `limit` | `{total, offset, records}` |
//! | GET | `/api/sessions/{id}/metrics` | | summary with category counts |
//! | GET | `/api/elements` | `graph` | element list |
//!
//! Errors are `{error, detail}` with status 400, 401, 404 or 409.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use craftbench::engine::{
    read_trial_log, session_summary, trial_line, write_trial_log, BehaviorCategory, SessionConfig, SessionState,
    TrialLogHeader, TrialRecord,
};
use craftbench::recipes::{Element, RecipeGraph};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, RwLock};

pub const DEFAULT_GRAPH: &str = "default";
const DEFAULT_HISTORY_LIMIT: usize = 100;
const MAX_HISTORY_LIMIT: usize = 1000;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Graphs by name; clients pick one at session creation.
    pub graphs: BTreeMap<String, Arc<RecipeGraph>>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Shared token required as `Authorization: Bearer …` on `/api`.
    pub token: Option<String>,
    /// Directory served for non-API paths.
    pub static_dir: Option<PathBuf>,
    pub max_trials: Option<usize>,
}

impl ServerConfig {
    pub fn with_graph(mut self, name: &str, graph: Arc<RecipeGraph>) -> Self {
        self.graphs.insert(name.to_string(), graph);
        self
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no graphs configured")]
    NoGraphs,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Human,
    Agent,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Human => "human",
            Mode::Agent => "agent",
        }
    }
}

struct LiveSession {
    mode: Mode,
    graph: String,
    state: SessionState,
    log: Option<File>,
}

struct Inner {
    config: ServerConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Result<Self, ServerError> {
        if config.graphs.is_empty() {
            return Err(ServerError::NoGraphs);
        }
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(AppState { inner: Arc::new(Inner { config, sessions: RwLock::new(HashMap::new()) }) })
    }

    /// Builds the state and reloads every checkpointed session. Files whose
    /// graph is not configured or that fail to replay are skipped with a
    /// warning.
    pub fn recover(config: ServerConfig) -> Result<Self, ServerError> {
        let app = Self::new(config)?;
        let Some(dir) = app.inner.config.checkpoint_dir.clone() else {
            return Ok(app);
        };
        let mut recovered = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match app.restore(&path) {
                Ok((id, session)) => {
                    recovered.insert(id, Arc::new(Mutex::new(session)));
                }
                Err(e) => log::warn!("skipping checkpoint: {e}"),
            }
        }
        log::info!("recovered {} session(s) from {}", recovered.len(), dir.display());
        *app.inner.sessions.try_write().expect("fresh state") = recovered;
        Ok(app)
    }

    fn restore(&self, path: &Path) -> Result<(String, LiveSession), ServerError> {
        let fail = |detail: String| ServerError::Checkpoint { path: path.to_path_buf(), detail };
        let (header, records) =
            read_trial_log(BufReader::new(File::open(path)?)).map_err(|e| fail(e.to_string()))?;
        let (graph_name, graph) = self
            .inner
            .config
            .graphs
            .iter()
            .find(|(_, g)| g.content_hash() == header.graph_hash)
            .ok_or_else(|| fail(format!("no configured graph has hash {}", header.graph_hash)))?;
        let mode = match header.label.as_deref() {
            Some("agent") => Mode::Agent,
            _ => Mode::Human,
        };
        let mut state =
            SessionState::new(graph.clone(), header.seed, SessionConfig { max_trials: header.max_trials });
        for r in &records {
            let replayed = state
                .apply_with_meta(&r.proposed.0, &r.proposed.1, r.agent_meta.clone())
                .map_err(|e| fail(e.to_string()))?;
            if !replayed.same_outcome(r) {
                return Err(fail(format!("trial {} does not replay", r.index)));
            }
        }
        let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| fail("bad file name".into()))?;
        let log = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok((id.to_string(), LiveSession { mode, graph: graph_name.clone(), state, log: Some(log) }))
    }

    pub async fn session_count(&self) -> usize {
        self.inner.sessions.read().await.len()
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ApiError> {
        self.inner
            .sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(detail: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, error: "bad_request", detail: detail.into() }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, error: "not_found", detail: detail.into() }
    }

    fn conflict(detail: impl Into<String>) -> Self {
        ApiError { status: StatusCode::CONFLICT, error: "conflict", detail: detail.into() }
    }

    fn internal(detail: impl Into<String>) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, error: "internal", detail: detail.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: Mode,
    #[serde(default = "default_graph")]
    pub graph: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_graph() -> String {
    DEFAULT_GRAPH.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub mode: Mode,
    pub graph: String,
    pub inventory: Vec<String>,
    pub trials: usize,
    pub discoveries: usize,
    pub max_trials: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct CombineRequest {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    #[serde(default)]
    pub offset: Option<usize>,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryPage {
    pub total: usize,
    pub offset: usize,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub session_id: String,
    pub trials: usize,
    pub discoveries: usize,
    pub inventory_size: usize,
    pub category_counts: BTreeMap<BehaviorCategory, usize>,
}

#[derive(Debug, Deserialize)]
pub struct ElementsQuery {
    #[serde(default)]
    pub graph: Option<String>,
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let Json(req) = body?;
    let graph = app
        .inner
        .config
        .graphs
        .get(&req.graph)
        .cloned()
        .ok_or_else(|| ApiError::bad_request(format!("unknown graph {:?}", req.graph)))?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let state = SessionState::new(graph, seed, SessionConfig { max_trials: app.inner.config.max_trials });
    let id = uuid::Uuid::new_v4().simple().to_string();
    let log = match &app.inner.config.checkpoint_dir {
        Some(dir) => {
            let mut f = File::create(dir.join(format!("{id}.jsonl"))).map_err(|e| ApiError::internal(e.to_string()))?;
            let header = TrialLogHeader::for_session(&state, Some(req.mode.as_str().to_string()));
            write_trial_log(&mut f, &header, &[]).map_err(|e| ApiError::internal(e.to_string()))?;
            Some(f)
        }
        None => None,
    };
    let session = LiveSession { mode: req.mode, graph: req.graph, state, log };
    app.inner.sessions.write().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let session = app.session(&id).await?;
    let s = session.lock().await;
    let summary = session_summary(&s.state);
    Ok(Json(SessionView {
        session_id: id,
        mode: s.mode,
        graph: s.graph.clone(),
        inventory: s.state.inventory_names(),
        trials: summary.trials,
        discoveries: summary.discoveries,
        max_trials: s.state.config().max_trials,
    }))
}

async fn combine(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<CombineRequest>, JsonRejection>,
) -> Result<Json<TrialRecord>, ApiError> {
    let Json(req) = body?;
    let session = app.session(&id).await?;
    let mut s = session.lock().await;
    if s.state.is_closed() {
        return Err(ApiError::conflict(format!("session closed after {} trials", s.state.trials())));
    }
    let record = s.state.apply_combination(&req.a, &req.b).map_err(|e| ApiError::conflict(e.to_string()))?;
    if let Some(log) = s.log.as_mut() {
        writeln!(log, "{}", trial_line(&record))
            .and_then(|_| log.flush())
            .map_err(|e| ApiError::internal(format!("checkpoint write failed: {e}")))?;
    }
    Ok(Json(record))
}

async fn history(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HistoryQuery>, QueryRejection>,
) -> Result<Json<HistoryPage>, ApiError> {
    let Query(q) = query?;
    let limit = q.limit.unwrap_or(DEFAULT_HISTORY_LIMIT);
    if limit > MAX_HISTORY_LIMIT {
        return Err(ApiError::bad_request(format!("limit must be at most {MAX_HISTORY_LIMIT}")));
    }
    let offset = q.offset.unwrap_or(0);
    let session = app.session(&id).await?;
    let s = session.lock().await;
    let all = s.state.history();
    let records = all.iter().skip(offset).take(limit).cloned().collect();
    Ok(Json(HistoryPage { total: all.len(), offset, records }))
}

async fn metrics(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Metrics>, ApiError> {
    let session = app.session(&id).await?;
    let s = session.lock().await;
    let summary = session_summary(&s.state);
    Ok(Json(Metrics {
        session_id: id,
        trials: summary.trials,
        discoveries: summary.discoveries,
        inventory_size: summary.inventory_size,
        category_counts: summary.category_counts,
    }))
}

async fn elements(
    State(app): State<AppState>,
    query: Result<Query<ElementsQuery>, QueryRejection>,
) -> Result<Json<Vec<Element>>, ApiError> {
    let Query(q) = query?;
    let name = q.graph.unwrap_or_else(default_graph);
    let graph = app.inner.config.graphs.get(&name).ok_or_else(|| ApiError::not_found(format!("no graph {name:?}")))?;
    Ok(Json(graph.elements().to_vec()))
}

async fn require_token(State(app): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &app.inner.config.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError { status: StatusCode::UNAUTHORIZED, error: "unauthorized", detail: "missing or wrong token".into() }
                .into_response();
        }
    }
    next.run(req).await
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(app): State<AppState>, req: Request) -> Response {
    let Some(root) = &app.inner.config.static_dir else {
        return ApiError::not_found("no such route").into_response();
    };
    let rel = req.uri().path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return ApiError::not_found("no such file").into_response();
    }
    let path = root.join(rel_path);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => ApiError::not_found("no such file").into_response(),
    }
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/combine", post(combine))
        .route("/api/sessions/{id}/history", get(history))
        .route("/api/sessions/{id}/metrics", get(metrics))
        .route("/api/elements", get(elements))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    api.fallback(static_file).with_state(app)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, app: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
