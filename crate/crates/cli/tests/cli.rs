use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use memgrain_cli::{run, EXIT_DOMAIN, EXIT_OK, EXIT_USAGE};
use memgrain_core::llm::OfflineLlm;
use memgrain_core::rng::{ManualClock, SplitMix64};
use memgrain_core::{MemoryStore, StoreConfig};
use memgrain_service::{router, AppState};
use serde_json::Value;

const NOW: u64 = 1_700_000_000_000;

/// In-process server on a free loopback port.
fn server(token: Option<&str>) -> SocketAddr {
    let store = MemoryStore::builder(StoreConfig::in_memory())
        .clock(Arc::new(ManualClock::new(NOW)))
        .entropy(Box::new(SplitMix64::new(5)))
        .open()
        .unwrap();
    let state = AppState { store: Arc::new(store), llm: Arc::new(OfflineLlm), token: token.map(String::from) };
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum_serve(listener, router(state, None)).await;
        });
    });
    rx.recv().unwrap()
}

async fn axum_serve(listener: tokio::net::TcpListener, app: axum::Router) {
    axum::serve(listener, app).await.unwrap();
}

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(addr: SocketAddr, vars: &[(&str, &str)], args: &[&str]) -> Out {
    let mut env: HashMap<String, String> = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    env.insert("MEMGRAIN_URL".into(), format!("http://{addr}"));
    env.insert("MEMGRAIN_CONFIG".into(), "/nonexistent/memgrain.toml".into());
    let lookup = |k: &str| env.get(k).cloned();
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let argv = std::iter::once("memgrain").chain(args.iter().copied());
    let code = run(argv, &lookup, &mut o, &mut e);
    Out { code, stdout: String::from_utf8(o).unwrap(), stderr: String::from_utf8(e).unwrap() }
}

fn raw(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> String {
    let c = reqwest::blocking::Client::new();
    let url = format!("http://{addr}{path}");
    let req = if method == "GET" { c.get(url) } else { c.post(url).body(body.unwrap_or_default().to_string()) };
    req.send().unwrap().text().unwrap()
}

#[test]
fn remember_prints_the_new_id() {
    let addr = server(None);
    let out = cli(addr, &[], &["remember", "-n", "a1", "-t", "decision", "Ship v2 Friday"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let id = out.stdout.trim();
    assert_eq!(id.len(), 32);
    let rec: Value = serde_json::from_str(&raw(addr, "GET", &format!("/v1/memories/{id}"), None)).unwrap();
    assert_eq!(rec["type"], "decision");
    assert_eq!(rec["content"], "Ship v2 Friday");
}

#[test]
fn json_mode_prints_the_api_body() {
    let addr = server(None);
    for text in ["Project deadline is April 15", "Dana owns the budget", "Standup moved to ten"] {
        assert_eq!(cli(addr, &[], &["remember", "-n", "a1", text]).code, EXIT_OK);
    }
    let cases: Vec<(Vec<&str>, &str, &str, Option<&str>)> = vec![
        (
            vec!["recall", "-n", "a1", "-q", "deadline"],
            "POST",
            "/v1/recall",
            Some(r#"{"namespace":"a1","query":"deadline","threshold":0.05,"max_k":100}"#),
        ),
        (
            vec!["answer", "-n", "a1", "-q", "deadline"],
            "POST",
            "/v1/answer",
            Some(r#"{"namespace":"a1","query":"deadline"}"#),
        ),
        (vec!["sessions", "-n", "a1"], "GET", "/v1/sessions?namespace=a1", None),
        (vec!["conflicts", "list", "-n", "a1"], "GET", "/v1/conflicts?namespace=a1", None),
        (vec!["asof", "-n", "a1", "-t", "1700000000000"], "GET", "/v1/memories/asof?namespace=a1&t=1700000000000", None),
        (
            vec!["changed-since", "-n", "a1", "--since", "0"],
            "GET",
            "/v1/memories?namespace=a1&changed_since=0",
            None,
        ),
        (
            vec!["daily-summary", "-n", "a1", "--date", "2023-11-14"],
            "GET",
            "/v1/daily-summary?namespace=a1&date=2023-11-14&format=json",
            None,
        ),
    ];
    for (args, method, path, body) in cases {
        let mut argv = vec!["--output", "json"];
        argv.extend(args.iter());
        let out = cli(addr, &[], &argv);
        assert_eq!(out.code, EXIT_OK, "{args:?}: {}", out.stderr);
        let got = out.stdout.trim_end();
        serde_json::from_str::<Value>(got).unwrap();
        assert_eq!(got, raw(addr, method, path, body), "{args:?}");
    }
}

#[test]
fn table_mode_ranks_hits() {
    let addr = server(None);
    cli(addr, &[], &["remember", "-n", "a1", "Project deadline is April 15"]);
    let out = cli(addr, &[], &["recall", "-n", "a1", "-q", "deadline", "--threshold", "0.05", "--max-k", "100"]);
    assert_eq!(out.code, EXIT_OK);
    let mut lines = out.stdout.lines();
    assert!(lines.next().unwrap().starts_with("RANK  SCORE"));
    assert!(lines.next().unwrap().ends_with("Project deadline is April 15"));
}

#[test]
fn resolving_drops_the_open_count() {
    let addr = server(None);
    cli(addr, &[], &["remember", "-n", "a1", "-t", "fact", "Project deadline is April 15"]);
    let out = cli(addr, &[], &["remember", "-n", "a1", "-t", "fact", "Project deadline is April 18"]);
    assert!(out.stderr.contains("conflicts resolve"), "{}", out.stderr);
    let open = |addr| {
        let v: Value = serde_json::from_str(&cli(addr, &[], &["-o", "json", "conflicts", "list", "-n", "a1"]).stdout).unwrap();
        v["conflicts"].as_array().unwrap().iter().map(|c| c["conflict_id"].as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    let before = open(addr);
    assert_eq!(before.len(), 1);
    let out = cli(addr, &[], &["conflicts", "resolve", &before[0], "--action", "supersede"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    assert!(out.stdout.starts_with(&format!("resolved {} with supersede", before[0])));
    assert_eq!(open(addr).len(), 0);
    let again = cli(addr, &[], &["conflicts", "resolve", &before[0], "--action", "retain"]);
    assert_eq!(again.code, EXIT_DOMAIN);
    assert!(again.stderr.contains("already_resolved"));
}

#[test]
fn exit_codes() {
    let addr = server(Some("tok"));
    // usage
    assert_eq!(cli(addr, &[], &["remember"]).code, EXIT_USAGE);
    assert_eq!(cli(addr, &[], &["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(cli(addr, &[], &["conflicts", "resolve", "x", "--action", "delete"]).code, EXIT_USAGE);
    let no_ns = cli(addr, &[("MEMGRAIN_TOKEN", "tok")], &["sessions"]);
    assert_eq!(no_ns.code, EXIT_USAGE);
    assert!(no_ns.stderr.contains("namespace"));
    // domain
    let unauth = cli(addr, &[], &["sessions", "-n", "a1"]);
    assert_eq!(unauth.code, EXIT_DOMAIN);
    assert!(unauth.stderr.contains("unauthorized"));
    let bad_type = cli(addr, &[("MEMGRAIN_TOKEN", "tok")], &["remember", "-n", "a1", "-t", "gossip", "x"]);
    assert_eq!(bad_type.code, EXIT_DOMAIN);
    assert!(bad_type.stderr.contains("unknown_type"));
    // namespace from env, token from flag
    let ok = cli(addr, &[("MEMGRAIN_NAMESPACE", "a1")], &["--token", "tok", "sessions"]);
    assert_eq!(ok.code, EXIT_OK, "{}", ok.stderr);
    // help and version
    let help = cli(addr, &[], &["--help"]);
    assert_eq!(help.code, EXIT_OK);
    assert!(help.stdout.contains("Usage: memgrain"));
}

#[test]
fn connection_refused_is_actionable() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let out = cli(addr, &[], &["sessions", "-n", "a1"]);
    assert_eq!(out.code, EXIT_DOMAIN);
    assert!(out.stderr.contains("cannot reach the memgrain server"), "{}", out.stderr);
    assert!(out.stderr.contains("memgrain serve"));
}

#[test]
fn bench_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let args = ["bench", "--seed", "3", "--distractors", "400", "--needles", "20", "--out", out_dir.to_str().unwrap()];
    let out = cli("127.0.0.1:9".parse().unwrap(), &[], &args);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let md = std::fs::read_to_string(out_dir.join("ablation.md")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(md.contains("stage1") && md.contains("stage4"));
    assert!(out.stdout.contains("ablation.csv"));
}
