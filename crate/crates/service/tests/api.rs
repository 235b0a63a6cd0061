use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use memgrain_core::llm::{CountingLlm, OfflineLlm};
use memgrain_core::rng::{ManualClock, SplitMix64};
use memgrain_core::{MemError, MemoryStore, StoreConfig};
use memgrain_service::{classify, router, AppState, ServiceConfig, DEFAULT_PORT};
use serde_json::{json, Value};
use tower::ServiceExt;

const NOW: u64 = 1_700_000_000_000; // 2023-11-14T22:13:20Z

fn app_with(token: Option<&str>, root: Option<&Path>) -> (Router, Arc<MemoryStore>, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(NOW));
    let cfg = StoreConfig { root: root.map(Path::to_path_buf), ..StoreConfig::in_memory() };
    let store = Arc::new(
        MemoryStore::builder(cfg).clock(clock.clone()).entropy(Box::new(SplitMix64::new(42))).open().unwrap(),
    );
    let state = AppState { store: store.clone(), llm: Arc::new(OfflineLlm), token: token.map(String::from) };
    (router(state, None), store, clock)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>, token: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Replays every golden exchange in file order against one fresh server and
/// compares status and body bytes. `UPDATE_GOLDEN=1` rewrites the files.
#[tokio::test]
async fn golden_exchanges_replay_byte_identical() {
    let (app, _, clock) = app_with(None, None);
    let update = std::env::var("UPDATE_GOLDEN").is_ok();
    let mut files: Vec<PathBuf> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    assert!(files.len() >= 10, "golden fixtures missing");
    for path in files {
        let mut g: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        if let Some(t) = g["clock"].as_u64() {
            clock.set(t);
        }
        let body = g["request"]["body"].as_str().map(String::from);
        let (status, got) = call(
            &app,
            g["request"]["method"].as_str().unwrap(),
            g["request"]["path"].as_str().unwrap(),
            body.as_deref(),
            None,
        )
        .await;
        if update {
            g["status"] = json!(status.as_u16());
            g["response"] = json!(got);
            std::fs::write(&path, serde_json::to_string_pretty(&g).unwrap() + "\n").unwrap();
            continue;
        }
        assert_eq!(status.as_u16() as u64, g["status"].as_u64().unwrap(), "{}", path.display());
        assert_eq!(got, g["response"].as_str().unwrap(), "{}", path.display());
    }
}

fn variant_name(e: &MemError) -> &'static str {
    match e {
        MemError::EmptyContent => "EmptyContent",
        MemError::Batch { .. } => "Batch",
        MemError::UnknownType(_) => "UnknownType",
        MemError::ClockOutOfRange(_) => "ClockOutOfRange",
        MemError::DimensionMismatch { .. } => "DimensionMismatch",
        MemError::DegenerateEmbedding => "DegenerateEmbedding",
        MemError::InvalidConfig(_) => "InvalidConfig",
        MemError::ExternalUnavailable(_) => "ExternalUnavailable",
        MemError::LlmUnavailable(_) => "LlmUnavailable",
        MemError::InvalidNamespace(_) => "InvalidNamespace",
        MemError::InvalidParams(_) => "InvalidParams",
        MemError::InvalidRange(_) => "InvalidRange",
        MemError::NotFound(_) => "NotFound",
        MemError::IllegalTransition(_) => "IllegalTransition",
        MemError::AlreadyResolved(_) => "AlreadyResolved",
        MemError::FutureDate(_) => "FutureDate",
        MemError::StorageFailure(_) => "StorageFailure",
        MemError::CorruptLog { .. } => "CorruptLog",
    }
}

#[test]
fn error_mapping_matches_fixture() {
    let s = || "x".to_string();
    let examples = [
        MemError::EmptyContent,
        MemError::Batch { index: 2, source: Box::new(MemError::DegenerateEmbedding) },
        MemError::UnknownType(s()),
        MemError::ClockOutOfRange(1),
        MemError::DimensionMismatch { expected: 256, actual: 8 },
        MemError::DegenerateEmbedding,
        MemError::InvalidConfig(s()),
        MemError::ExternalUnavailable(s()),
        MemError::LlmUnavailable(s()),
        MemError::InvalidNamespace(s()),
        MemError::InvalidParams(s()),
        MemError::InvalidRange(s()),
        MemError::NotFound(s()),
        MemError::IllegalTransition(s()),
        MemError::AlreadyResolved(s()),
        MemError::FutureDate(s()),
        MemError::StorageFailure(s()),
        MemError::CorruptLog { seq: 3, reason: s() },
    ];
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("error_map.json");
    let table: BTreeMap<String, (u16, String)> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(table.len(), examples.len());
    let mut pairs = std::collections::BTreeSet::new();
    for e in &examples {
        let (status, code) = classify(e);
        let want = &table[variant_name(e)];
        assert_eq!((status.as_u16(), code.to_string()), *want, "{}", variant_name(e));
        if !matches!(e, MemError::Batch { .. }) {
            assert!(pairs.insert(code), "code {code} used twice");
        }
    }
}

#[tokio::test]
async fn token_guards_api_but_not_health_or_ui() {
    let (app, _, _) = app_with(Some("s3cret"), None);
    let body = r#"{"namespace":"a1","content":"hello"}"#;
    let (st, resp) = call(&app, "POST", "/v1/remember", Some(body), None).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    assert!(resp.contains("\"code\":\"unauthorized\""));
    let (st, _) = call(&app, "POST", "/v1/remember", Some(body), Some("wrong")).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call(&app, "POST", "/v1/remember", Some(body), Some("s3cret")).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(call(&app, "GET", "/healthz", None, None).await.0, StatusCode::OK);
    let (st, html) = call(&app, "GET", "/ui/", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(html.contains("<h1>memgrain</h1>"));
}

#[test]
fn binds_loopback_without_token() {
    let open = ServiceConfig::default();
    assert!(open.bind_addr().ip().is_loopback());
    assert_eq!(open.bind_addr().port(), DEFAULT_PORT);
    let guarded = ServiceConfig { token: Some("t".into()), port: Some(9000), ..Default::default() };
    assert!(guarded.bind_addr().ip().is_unspecified());
    assert_eq!(guarded.bind_addr().port(), 9000);
}

#[tokio::test]
async fn health_counts_follow_writes() {
    let (app, _, _) = app_with(None, None);
    let (_, h) = call(&app, "GET", "/healthz", None, None).await;
    assert_eq!(h, r#"{"namespaces":0,"open_conflicts":0,"records":0,"status":"ok"}"#);
    for (i, t) in ["fact", "event", "goal"].iter().enumerate() {
        let body = json!({"namespace": "a1", "content": format!("entry {i}"), "type": t}).to_string();
        assert_eq!(call(&app, "POST", "/v1/remember", Some(&body), None).await.0, StatusCode::CREATED);
    }
    let (_, h) = call(&app, "GET", "/healthz", None, None).await;
    assert_eq!(h, r#"{"namespaces":1,"open_conflicts":0,"records":3,"status":"ok"}"#);
}

#[tokio::test]
async fn answer_issues_one_retrieval_per_call() {
    let clock = Arc::new(ManualClock::new(NOW));
    let store = Arc::new(MemoryStore::builder(StoreConfig::in_memory()).clock(clock).open().unwrap());
    let llm = Arc::new(CountingLlm::new(OfflineLlm));
    let state = AppState { store: store.clone(), llm: llm.clone(), token: None };
    let app = router(state, None);
    let body = r#"{"namespace":"a1","content":"The launch is on Friday"}"#;
    call(&app, "POST", "/v1/remember", Some(body), None).await;
    for i in 0..100 {
        let before = store.retrieval_count();
        let q = json!({"namespace": "a1", "question": format!("when is the launch {i}")}).to_string();
        let (st, resp) = call(&app, "POST", "/v1/answer", Some(&q), None).await;
        assert_eq!(st, StatusCode::OK);
        assert!(resp.contains("\"answer\":\"The launch is on Friday\""));
        assert_eq!(store.retrieval_count() - before, 1);
    }
    assert_eq!(llm.calls(), 100);
}

#[tokio::test]
async fn daily_summary_is_written_under_the_data_dir() {
    let dir = tempfile_dir();
    let (app, _, _) = app_with(None, Some(dir.path()));
    let body = r#"{"namespace":"a1","content":"Ship v2 Friday","type":"decision"}"#;
    call(&app, "POST", "/v1/remember", Some(body), None).await;
    let (st, md) = call(&app, "GET", "/v1/daily-summary?namespace=a1&date=2023-11-14", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(md.starts_with("# Daily summary for a1 on 2023-11-14"));
    assert_eq!(std::fs::read_to_string(dir.path().join("a1/daily/2023-11-14.md")).unwrap(), md);
    let (st, _) = call(&app, "GET", "/v1/daily-summary?namespace=a1&date=2023-11-15", None, None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

struct TempDir(PathBuf);

impl TempDir {
    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn tempfile_dir() -> TempDir {
    tempfile_dir_named("data")
}

fn tempfile_dir_named(name: &str) -> TempDir {
    let p = std::env::temp_dir().join(format!("memgrain-api-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    TempDir(p)
}

#[tokio::test]
async fn ui_dir_is_served_when_configured() {
    let dir = tempfile_dir_named("ui");
    std::fs::write(dir.path().join("index.html"), "<p>dashboard</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let store = Arc::new(MemoryStore::in_memory());
    let state = AppState { store, llm: Arc::new(OfflineLlm), token: Some("t".into()) };
    let app = router(state, Some(dir.path().to_path_buf()));
    assert_eq!(call(&app, "GET", "/ui/", None, None).await, (StatusCode::OK, "<p>dashboard</p>".into()));
    assert_eq!(call(&app, "GET", "/ui/app.js", None, None).await.1, "console.log(1)");
    assert_eq!(call(&app, "GET", "/ui", None, None).await.0, StatusCode::PERMANENT_REDIRECT);
}
