//! HTTP API over a shared [`MemoryStore`]. Every store call runs on the
//! blocking pool; responses are canonical (sorted-key) JSON.

pub mod error;

use std::collections::{BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::Router;
use memgrain_core::conflict::ConflictFilter;
use memgrain_core::intel;
use memgrain_core::llm::{self, ExternalLlm, LlmClient, OfflineLlm};
use memgrain_core::model::{parse_time, Provenance};
use memgrain_core::{
    MemError, MemoryRecord, MemoryStore, MemoryType, Millis, RecordId, RememberRequest, ResolutionAction,
    RetrievalParams, Session,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use error::{classify, ApiError};

pub const DEFAULT_PORT: u16 = 7749;
pub const TOKEN_ENV: &str = "MEMGRAIN_TOKEN";
pub const PORT_ENV: &str = "MEMGRAIN_PORT";
pub const DATA_DIR_ENV: &str = "MEMGRAIN_DATA_DIR";
pub const LLM_ENDPOINT_ENV: &str = "MEMGRAIN_LLM_ENDPOINT";
pub const UI_DIR_ENV: &str = "MEMGRAIN_UI_DIR";

const PLACEHOLDER_UI: &str = include_str!("../ui/index.html");

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub token: Option<String>,
    /// External completion endpoint for `/v1/answer`; offline when unset.
    pub llm_endpoint: Option<String>,
    /// Dashboard bundle served under `/ui/`; a placeholder page otherwise.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, MemError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let port = var(PORT_ENV)
            .map(|p| p.parse::<u16>().map_err(|_| MemError::InvalidConfig(format!("{PORT_ENV}={p}"))))
            .transpose()?;
        Ok(ServiceConfig {
            data_dir: var(DATA_DIR_ENV).map(PathBuf::from),
            port,
            token: var(TOKEN_ENV),
            llm_endpoint: var(LLM_ENDPOINT_ENV),
            ui_dir: var(UI_DIR_ENV).map(PathBuf::from),
        })
    }

    /// Loopback unless a token protects the API.
    pub fn bind_addr(&self) -> SocketAddr {
        let ip = if self.token.is_some() { IpAddr::V4(Ipv4Addr::UNSPECIFIED) } else { IpAddr::V4(Ipv4Addr::LOCALHOST) };
        SocketAddr::new(ip, self.port.unwrap_or(DEFAULT_PORT))
    }

    pub fn llm(&self) -> Result<Arc<dyn LlmClient>, MemError> {
        Ok(match &self.llm_endpoint {
            Some(url) => Arc::new(ExternalLlm::new(url, None)?),
            None => Arc::new(OfflineLlm),
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<MemoryStore>,
    pub llm: Arc<dyn LlmClient>,
    pub token: Option<String>,
}

pub fn canonical_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match memgrain_core::canonical::to_string(value) {
        Ok(body) => (status, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

type ApiResult = Result<Response, ApiError>;

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&MemoryStore) -> Result<T, MemError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

fn time_arg(v: &Value) -> Result<Millis, MemError> {
    match v {
        Value::Number(n) => n.as_u64().ok_or_else(|| MemError::InvalidParams(format!("time {n} is not a u64"))),
        Value::String(s) => parse_time(s),
        other => Err(MemError::InvalidParams(format!("time {other} must be a number or string"))),
    }
}

fn required<'a>(q: &'a HashMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    q.get(key).map(String::as_str).ok_or_else(|| ApiError::malformed(format!("missing query parameter `{key}`")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RememberBody {
    namespace: String,
    content: String,
    #[serde(default, rename = "type")]
    memory_type: Option<String>,
    #[serde(default)]
    tags: BTreeSet<String>,
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    at: Option<Value>,
    #[serde(default)]
    provenance: Option<String>,
}

impl RememberBody {
    fn into_request(self) -> Result<RememberRequest, MemError> {
        let provenance = match self.provenance.as_deref() {
            None | Some("stated") => Provenance::Stated,
            Some("inferred") => Provenance::Inferred,
            Some(other) => return Err(MemError::InvalidParams(format!("unknown provenance `{other}`"))),
        };
        Ok(RememberRequest {
            namespace: self.namespace,
            content: self.content,
            memory_type: self.memory_type.as_deref().map(MemoryType::from_name).transpose()?,
            tags: self.tags,
            session_id: self.session_id,
            at: self.at.as_ref().map(time_arg).transpose()?,
            provenance,
        })
    }
}

#[derive(Serialize)]
struct RememberReply {
    id: RecordId,
    state: &'static str,
    records: Vec<MemoryRecord>,
    conflicts: Vec<memgrain_core::ConflictRecord>,
    session: Session,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchBody {
    namespace: String,
    #[serde(alias = "question")]
    query: String,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    max_k: Option<usize>,
    #[serde(default)]
    types: Option<Vec<String>>,
    #[serde(default)]
    as_of: Option<Value>,
    #[serde(default)]
    include_superseded: bool,
}

impl SearchBody {
    fn params(&self) -> Result<RetrievalParams, MemError> {
        let defaults = RetrievalParams::default();
        let types = self
            .types
            .as_ref()
            .map(|ts| ts.iter().map(|t| MemoryType::from_name(t)).collect::<Result<BTreeSet<_>, _>>())
            .transpose()?;
        let p = RetrievalParams {
            max_k: self.max_k.unwrap_or(defaults.max_k),
            threshold: self.threshold.unwrap_or(defaults.threshold),
            types,
            as_of: self.as_of.as_ref().map(time_arg).transpose()?,
            include_superseded: self.include_superseded,
        };
        p.validate()?;
        Ok(p)
    }
}

async fn remember(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let req = parse_body::<RememberBody>(&body)?.into_request()?;
    let out = blocking(&state, move |s| s.remember(req)).await?;
    let first = out.record();
    let reply = RememberReply {
        id: first.id,
        state: first.state.as_str(),
        records: out.records.clone(),
        conflicts: out.conflicts,
        session: out.session,
    };
    Ok(canonical_response(StatusCode::CREATED, &reply))
}

#[derive(Serialize)]
struct HitsReply {
    hits: Vec<memgrain_core::ScoredHit>,
}

async fn recall(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let b: SearchBody = parse_body(&body)?;
    let params = b.params()?;
    let hits = blocking(&state, move |s| s.recall(&b.namespace, &b.query, &params)).await?;
    Ok(canonical_response(StatusCode::OK, &HitsReply { hits }))
}

async fn answer(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let b: SearchBody = parse_body(&body)?;
    let params = b.params()?;
    let llm = state.llm.clone();
    let out = blocking(&state, move |s| llm::answer(s, llm.as_ref(), &b.namespace, &b.query, &params)).await?;
    Ok(canonical_response(StatusCode::OK, &out))
}

fn record_id(raw: &str) -> Result<RecordId, ApiError> {
    RecordId::parse(raw).map_err(|_| ApiError::from(MemError::NotFound(raw.to_string())))
}

async fn get_memory(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let id = record_id(&id)?;
    let rec = blocking(&state, move |s| s.get(id).ok_or_else(|| MemError::NotFound(id.to_hex()))).await?;
    Ok(canonical_response(StatusCode::OK, &rec))
}

#[derive(Serialize)]
struct MemoriesReply {
    memories: Vec<MemoryRecord>,
}

async fn changed_since(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let ns = required(&q, "namespace")?.to_string();
    let t0 = parse_time(required(&q, "changed_since")?)?;
    let t1 = q.get("until").map(|u| parse_time(u)).transpose()?;
    let memories = blocking(&state, move |s| s.changed_since(&ns, t0, t1)).await?;
    Ok(canonical_response(StatusCode::OK, &MemoriesReply { memories }))
}

async fn as_of(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let ns = required(&q, "namespace")?.to_string();
    let t = parse_time(required(&q, "t")?)?;
    let memories = blocking(&state, move |s| Ok(s.as_of(&ns, t))).await?;
    Ok(canonical_response(StatusCode::OK, &MemoriesReply { memories }))
}

#[derive(Serialize)]
struct ConflictsReply {
    conflicts: Vec<memgrain_core::ConflictRecord>,
}

async fn conflicts(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let ns = required(&q, "namespace")?.to_string();
    let filter: ConflictFilter = q.get("state").map_or(Ok(ConflictFilter::Open), |s| s.parse())?;
    let conflicts = blocking(&state, move |s| Ok(s.list_conflicts(&ns, filter))).await?;
    Ok(canonical_response(StatusCode::OK, &ConflictsReply { conflicts }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolveBody {
    action: String,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    actor: Option<String>,
    #[serde(default)]
    at: Option<Value>,
}

async fn resolve(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let conflict_id = record_id(&id)?;
    let b: ResolveBody = parse_body(&body)?;
    let action: ResolutionAction = b.action.parse()?;
    let target = b.target.as_deref().map(RecordId::parse).transpose()?;
    let at = b.at.as_ref().map(time_arg).transpose()?;
    let actor = b.actor.unwrap_or_else(|| "api".to_string());
    let out = blocking(&state, move |s| s.resolve(conflict_id, action, &actor, target, at)).await?;
    Ok(canonical_response(StatusCode::OK, &out))
}

#[derive(Serialize)]
struct SessionsReply {
    sessions: Vec<Session>,
}

async fn sessions(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let ns = required(&q, "namespace")?.to_string();
    let sessions = blocking(&state, move |s| Ok(s.sessions(&ns))).await?;
    Ok(canonical_response(StatusCode::OK, &SessionsReply { sessions }))
}

/// Rendered Markdown by default; `format=json` returns the structured summary.
async fn daily_summary(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let ns = required(&q, "namespace")?.to_string();
    let date = q.get("date").map(|d| intel::parse_date(d)).transpose()?;
    let json = match q.get("format").map(String::as_str) {
        None | Some("markdown") => false,
        Some("json") => true,
        Some(other) => return Err(MemError::InvalidParams(format!("unknown format `{other}`")).into()),
    };
    let (summary, _) = blocking(&state, move |s| {
        let date = match date {
            Some(d) => d,
            None => intel::date_of(s.now()),
        };
        intel::generate(s, &ns, date)
    })
    .await?;
    if json {
        return Ok(canonical_response(StatusCode::OK, &summary));
    }
    Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], summary.rendered).into_response())
}

#[derive(Serialize)]
struct HealthReply {
    status: &'static str,
    namespaces: usize,
    records: usize,
    open_conflicts: usize,
}

async fn healthz(State(state): State<AppState>) -> ApiResult {
    let h = blocking(&state, |s| Ok(s.health())).await?;
    Ok(canonical_response(
        StatusCode::OK,
        &HealthReply { status: "ok", namespaces: h.namespaces, records: h.records, open_conflicts: h.open_conflicts },
    ))
}

async fn placeholder_ui() -> Response {
    ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER_UI).into_response()
}

async fn fallback() -> ApiError {
    ApiError::no_route()
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request<Body>, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

/// Full route table. `/healthz` and `/ui/` stay open; `/v1/*` needs the token
/// when one is configured.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/remember", post(remember))
        .route("/v1/recall", post(recall))
        .route("/v1/answer", post(answer))
        .route("/v1/memories", get(changed_since))
        .route("/v1/memories/asof", get(as_of))
        .route("/v1/memories/{id}", get(get_memory))
        .route("/v1/conflicts", get(conflicts))
        .route("/v1/conflicts/{id}/resolve", post(resolve))
        .route("/v1/sessions", get(sessions))
        .route("/v1/daily-summary", get(daily_summary))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let ui = match ui_dir {
        Some(dir) => Router::new().nest_service("/ui/", tower_http::services::ServeDir::new(dir)),
        None => Router::new().route("/ui/", get(placeholder_ui)),
    };
    api.merge(ui)
        .route("/ui", get(|| async { Redirect::permanent("/ui/") }))
        .route("/healthz", get(healthz))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until Ctrl-C on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub async fn serve(store: Arc<MemoryStore>, config: ServiceConfig) -> Result<(), MemError> {
    let state = AppState { store, llm: config.llm()?, token: config.token.clone() };
    let app = router(state, config.ui_dir.clone());
    let listener = tokio::net::TcpListener::bind(config.bind_addr()).await?;
    serve_on(listener, app).await?;
    Ok(())
}
