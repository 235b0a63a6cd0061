//! `memgrain` command line: a thin client over the HTTP API plus `serve` and
//! the offline `bench` harness.

pub mod client;
pub mod config;
pub mod render;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use memgrain_core::harness::{self, StageConfig};
use memgrain_core::rng::{Clock, ManualClock, SplitMix64};
use memgrain_core::{MemoryStore, StoreConfig};
use memgrain_service::{AppState, ServiceConfig};
use serde_json::{json, Value};

use client::{ApiClient, Reply};
use config::{CliConfig, Layer, Output};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit 2.
    Usage(String),
    /// The request was well formed but failed: exit 1.
    Domain(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Domain(_) => EXIT_DOMAIN,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "memgrain", version, about = "Typed long-term memory for agents", propagate_version = true)]
pub struct Cli {
    /// Server base URL [env: MEMGRAIN_URL] [default: http://127.0.0.1:7749]
    #[arg(long, global = true, value_name = "URL")]
    pub server: Option<String>,
    /// Bearer token for the API [env: MEMGRAIN_TOKEN]
    #[arg(long, global = true, value_name = "TOKEN")]
    pub token: Option<String>,
    /// Output mode; json prints the raw API body [env: MEMGRAIN_OUTPUT]
    #[arg(long, short = 'o', global = true, value_enum)]
    pub output: Option<Output>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the HTTP API server
    Serve(ServeArgs),
    /// Store a memory and print its id
    Remember(RememberArgs),
    /// Ranked retrieval for a query
    Recall(RecallArgs),
    /// Answer a question from one retrieval
    Answer(AnswerArgs),
    /// List or resolve contradictions
    #[command(subcommand)]
    Conflicts(ConflictsCommand),
    /// List write sessions
    Sessions(NsArgs),
    /// Memories as they stood at a point in time
    Asof(AsofArgs),
    /// Memories created or changed inside a window
    ChangedSince(ChangedSinceArgs),
    /// Daily digest of sessions, memory counts and conflicts
    DailySummary(DailySummaryArgs),
    /// Run the retrieval ablation harness in process
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct NsArgs {
    /// Namespace [env: MEMGRAIN_NAMESPACE]
    #[arg(long, short = 'n')]
    pub namespace: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Listen port; 0 picks a free one [env: MEMGRAIN_PORT] [default: 7749]
    #[arg(long)]
    pub port: Option<u16>,
    /// Directory holding the event logs [env: MEMGRAIN_DATA_DIR] [default: ~/.memgrain/data]
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Keep everything in memory; nothing is written to disk
    #[arg(long, conflicts_with = "data_dir")]
    pub in_memory: bool,
    /// Directory with a built dashboard to serve under /ui/ [env: MEMGRAIN_UI_DIR]
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    /// External completion endpoint for answers [env: MEMGRAIN_LLM_ENDPOINT]
    #[arg(long, value_name = "URL")]
    pub llm_endpoint: Option<String>,
    /// fsync every log append
    #[arg(long)]
    pub sync_writes: bool,
    /// Seed ids from a fixed sequence (testing)
    #[arg(long, hide = true)]
    pub entropy_seed: Option<u64>,
    /// Freeze the clock at this epoch millisecond (testing)
    #[arg(long, hide = true)]
    pub fixed_clock: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RememberArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// Memory type, e.g. fact, decision, preference
    #[arg(long = "type", short = 't', value_name = "TYPE")]
    pub memory_type: Option<String>,
    /// Tag; repeatable
    #[arg(long = "tag", value_name = "TAG")]
    pub tags: Vec<String>,
    /// Attach to this session id instead of the current window
    #[arg(long)]
    pub session: Option<String>,
    /// Creation time, epoch ms or RFC 3339 [default: now]
    #[arg(long, value_name = "TIME")]
    pub at: Option<String>,
    /// Mark the memory as inferred rather than stated
    #[arg(long)]
    pub inferred: bool,
    /// Memory text
    pub content: String,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// Query text
    #[arg(long, short = 'q')]
    pub query: String,
    /// Minimum score to admit a hit
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    /// Most hits returned
    #[arg(long, default_value_t = 100)]
    pub max_k: usize,
    /// Restrict to a memory type; repeatable
    #[arg(long = "type", short = 't', value_name = "TYPE")]
    pub types: Vec<String>,
    /// Search memories as they stood at this time
    #[arg(long, value_name = "TIME")]
    pub as_of: Option<String>,
    /// Include superseded and retired memories
    #[arg(long)]
    pub include_superseded: bool,
}

#[derive(Args, Debug)]
pub struct RecallArgs {
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct AnswerArgs {
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Subcommand, Debug)]
pub enum ConflictsCommand {
    /// List conflicts in a namespace
    List(ConflictsListArgs),
    /// Resolve one conflict
    Resolve(ConflictsResolveArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConflictState {
    Open,
    Resolved,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Action {
    Supersede,
    Retain,
    Annotate,
}

#[derive(Args, Debug)]
pub struct ConflictsListArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// Which conflicts to show
    #[arg(long, value_enum, default_value = "open")]
    pub state: ConflictState,
}

#[derive(Args, Debug)]
pub struct ConflictsResolveArgs {
    /// Conflict id
    pub id: String,
    /// Resolution
    #[arg(long, value_enum)]
    pub action: Action,
    /// Candidate to act on alone [default: every candidate]
    #[arg(long, value_name = "ID")]
    pub target: Option<String>,
    /// Who resolved it
    #[arg(long, default_value = "cli")]
    pub actor: String,
}

#[derive(Args, Debug)]
pub struct AsofArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// Point in time, epoch ms or RFC 3339
    #[arg(long, short = 't', value_name = "TIME")]
    pub at: String,
}

#[derive(Args, Debug)]
pub struct ChangedSinceArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// Window start (inclusive)
    #[arg(long, value_name = "TIME")]
    pub since: String,
    /// Window end (exclusive) [default: open]
    #[arg(long, value_name = "TIME")]
    pub until: Option<String>,
}

#[derive(Args, Debug)]
pub struct DailySummaryArgs {
    #[command(flatten)]
    pub ns: NsArgs,
    /// UTC day, YYYY-MM-DD [default: today]
    #[arg(long)]
    pub date: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Corpus seed
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Distractor sentences
    #[arg(long, default_value_t = 100_000)]
    pub distractors: usize,
    /// Planted needles
    #[arg(long, default_value_t = 500)]
    pub needles: usize,
    /// Directory for ablation.csv and ablation.md
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Add an uncapped (max_k = inf, threshold 0.05) stage
    #[arg(long)]
    pub uncapped: bool,
}

/// The clap command tree, for help rendering.
pub fn command() -> clap::Command {
    Cli::command()
}

/// Parses `argv`, runs it and returns the exit code. `env` supplies
/// environment lookups so tests can run hermetically.
pub fn run<I, T>(argv: I, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match execute(cli, env, out, err) {
        Ok(code) => code,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Domain(m)) = &e;
            let _ = writeln!(err, "error: {m}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let flags = Layer { server_url: cli.server, token: cli.token, output: cli.output, namespace: None };
    let cfg = CliConfig::resolve(env, flags).map_err(CliError::Usage)?;
    match cli.command {
        Command::Serve(a) => serve(a, &cfg, env, err),
        Command::Bench(a) => bench(a, &cfg, out),
        other => {
            let api = ApiClient::new(&cfg.server_url, cfg.token.clone())?;
            Ctx { cfg: &cfg, api, out, err }.dispatch(other)
        }
    }
}

struct Ctx<'a> {
    cfg: &'a CliConfig,
    api: ApiClient,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

fn io(e: std::io::Error) -> CliError {
    CliError::Domain(e.to_string())
}

impl Ctx<'_> {
    fn namespace(&self, ns: NsArgs) -> Result<String, CliError> {
        ns.namespace.or_else(|| self.cfg.namespace.clone()).ok_or_else(|| {
            CliError::Usage("no namespace: pass -n/--namespace or set MEMGRAIN_NAMESPACE".into())
        })
    }

    /// Prints the reply. Non-2xx replies become exit 1 in both modes.
    fn emit(&mut self, reply: Reply, table: impl Fn(&Value) -> String) -> Result<i32, CliError> {
        let ok = (200..300).contains(&reply.status);
        match (self.cfg.output, ok) {
            (Output::Json, _) => writeln!(self.out, "{}", reply.body).map_err(io)?,
            (Output::Table, true) => self.out.write_all(table(&reply.json()?).as_bytes()).map_err(io)?,
            (Output::Table, false) => self.err.write_all(render::error(&reply.body, reply.status).as_bytes()).map_err(io)?,
        }
        Ok(if ok { EXIT_OK } else { EXIT_DOMAIN })
    }

    fn search_body(&self, a: SearchArgs) -> Result<Value, CliError> {
        let mut body = json!({
            "namespace": self.namespace(a.ns)?,
            "query": a.query,
            "threshold": a.threshold,
            "max_k": a.max_k,
            "include_superseded": a.include_superseded,
        });
        if !a.types.is_empty() {
            body["types"] = json!(a.types);
        }
        if let Some(t) = a.as_of {
            body["as_of"] = json!(t);
        }
        Ok(body)
    }

    fn dispatch(mut self, cmd: Command) -> Result<i32, CliError> {
        match cmd {
            Command::Remember(a) => {
                let mut body = json!({ "namespace": self.namespace(a.ns)?, "content": a.content, "tags": a.tags });
                if let Some(t) = a.memory_type {
                    body["type"] = json!(t);
                }
                if let Some(s) = a.session {
                    body["session_id"] = json!(s);
                }
                if let Some(t) = a.at {
                    body["at"] = json!(t);
                }
                if a.inferred {
                    body["provenance"] = json!("inferred");
                }
                let reply = self.api.post("/v1/remember", &body)?;
                if self.cfg.output == Output::Table && reply.status == 201 {
                    let notes = render::conflict_notes(&reply.json()?);
                    self.err.write_all(notes.as_bytes()).map_err(io)?;
                }
                self.emit(reply, |v| format!("{}\n", v["id"].as_str().unwrap_or_default()))
            }
            Command::Recall(a) => {
                let body = self.search_body(a.search)?;
                let reply = self.api.post("/v1/recall", &body)?;
                self.emit(reply, render::hits)
            }
            Command::Answer(a) => {
                let body = self.search_body(a.search)?;
                let reply = self.api.post("/v1/answer", &body)?;
                self.emit(reply, render::answer)
            }
            Command::Conflicts(ConflictsCommand::List(a)) => {
                let state = a.state.to_possible_value().expect("not skipped").get_name().to_string();
                let q = [("namespace", self.namespace(a.ns)?), ("state", state)];
                let reply = self.api.get("/v1/conflicts", &q)?;
                self.emit(reply, render::conflicts)
            }
            Command::Conflicts(ConflictsCommand::Resolve(a)) => {
                let action = a.action.to_possible_value().expect("not skipped").get_name().to_string();
                let mut body = json!({ "action": action, "actor": a.actor });
                if let Some(t) = a.target {
                    body["target"] = json!(t);
                }
                let reply = self.api.post(&format!("/v1/conflicts/{}/resolve", a.id), &body)?;
                self.emit(reply, render::resolved)
            }
            Command::Sessions(a) => {
                let reply = self.api.get("/v1/sessions", &[("namespace", self.namespace(a)?)])?;
                self.emit(reply, render::sessions)
            }
            Command::Asof(a) => {
                let q = [("namespace", self.namespace(a.ns)?), ("t", a.at)];
                let reply = self.api.get("/v1/memories/asof", &q)?;
                self.emit(reply, render::memories)
            }
            Command::ChangedSince(a) => {
                let mut q = vec![("namespace", self.namespace(a.ns)?), ("changed_since", a.since)];
                if let Some(u) = a.until {
                    q.push(("until", u));
                }
                let reply = self.api.get("/v1/memories", &q)?;
                self.emit(reply, render::memories)
            }
            Command::DailySummary(a) => {
                let format = match self.cfg.output {
                    Output::Json => "json",
                    Output::Table => "markdown",
                };
                let mut q = vec![("namespace", self.namespace(a.ns)?), ("format", format.to_string())];
                if let Some(d) = a.date {
                    q.push(("date", d));
                }
                let reply = self.api.get("/v1/daily-summary", &q)?;
                if self.cfg.output == Output::Table && reply.status == 200 {
                    self.out.write_all(reply.body.as_bytes()).map_err(io)?;
                    return Ok(EXIT_OK);
                }
                self.emit(reply, |_| String::new())
            }
            Command::Serve(_) | Command::Bench(_) => unreachable!("handled before dispatch"),
        }
    }
}

fn default_data_dir(env: &dyn Fn(&str) -> Option<String>) -> Result<PathBuf, CliError> {
    env("HOME")
        .map(|h| PathBuf::from(h).join(".memgrain").join("data"))
        .ok_or_else(|| CliError::Usage("no data directory: pass --data-dir or set MEMGRAIN_DATA_DIR".into()))
}

fn serve(a: ServeArgs, cfg: &CliConfig, env: &dyn Fn(&str) -> Option<String>, err: &mut dyn Write) -> Result<i32, CliError> {
    let var = |k: &str| env(k).filter(|v| !v.is_empty());
    let port = match a.port {
        Some(p) => Some(p),
        None => var(memgrain_service::PORT_ENV)
            .map(|p| p.parse::<u16>().map_err(|_| CliError::Usage(format!("bad {}: {p}", memgrain_service::PORT_ENV))))
            .transpose()?,
    };
    let root = if a.in_memory {
        None
    } else {
        Some(match a.data_dir.or_else(|| var(memgrain_service::DATA_DIR_ENV).map(PathBuf::from)) {
            Some(d) => d,
            None => default_data_dir(env)?,
        })
    };
    let service = ServiceConfig {
        data_dir: root.clone(),
        port,
        token: cfg.token.clone(),
        llm_endpoint: a.llm_endpoint.or_else(|| var(memgrain_service::LLM_ENDPOINT_ENV)),
        ui_dir: a.ui_dir.or_else(|| var(memgrain_service::UI_DIR_ENV).map(PathBuf::from)),
    };
    let store_cfg = StoreConfig { root: root.clone(), sync_writes: a.sync_writes, ..StoreConfig::default() };
    let mut builder = MemoryStore::builder(store_cfg);
    if let Some(seed) = a.entropy_seed {
        builder = builder.entropy(Box::new(SplitMix64::new(seed)));
    }
    if let Some(t) = a.fixed_clock {
        builder = builder.clock(Arc::new(ManualClock::new(t)) as Arc<dyn Clock>);
    }
    let store = Arc::new(builder.open().map_err(|e| CliError::Domain(e.to_string()))?);
    for (ns, t) in &store.open_report().truncations {
        let _ = writeln!(
            err,
            "recovered namespace {ns}: dropped {} bytes of a torn record at seq {} ({})",
            t.dropped_bytes, t.seq, t.reason
        );
    }
    let state = AppState {
        store,
        llm: service.llm().map_err(|e| CliError::Domain(e.to_string()))?,
        token: service.token.clone(),
    };
    let app = memgrain_service::router(state, service.ui_dir.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(service.bind_addr()).await?;
        let addr = listener.local_addr()?;
        let data = root.as_ref().map_or_else(|| "in memory".to_string(), |r| r.display().to_string());
        writeln!(err, "memgrain listening on http://{addr} (data: {data})")?;
        err.flush()?;
        memgrain_service::serve_on(listener, app).await
    })
    .map_err(|e| CliError::Domain(format!("server failed: {e}")))?;
    Ok(EXIT_OK)
}

fn bench(a: BenchArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let domain = |e: memgrain_core::MemError| CliError::Domain(e.to_string());
    let corpus = harness::generate_corpus(a.seed, a.distractors, a.needles).map_err(domain)?;
    let mut stages = StageConfig::shipped();
    if a.uncapped {
        stages.push(StageConfig::uncapped());
    }
    let metrics = harness::run_ablation(&corpus, &stages).map_err(domain)?;
    let report = harness::report(&metrics).map_err(domain)?;
    let (csv, md) = harness::write_report(&a.out, &report).map_err(domain)?;
    match cfg.output {
        Output::Json => {
            let rows = serde_json::to_string(&report.rows).map_err(|e| CliError::Domain(e.to_string()))?;
            writeln!(out, "{rows}").map_err(io)?;
        }
        Output::Table => {
            out.write_all(report.markdown.as_bytes()).map_err(io)?;
            writeln!(out, "\nwrote {} and {}", csv.display(), md.display()).map_err(io)?;
        }
    }
    Ok(EXIT_OK)
}
