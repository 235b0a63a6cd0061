//! Durable, namespace-isolated, bitemporal record store.
//!
//! Every mutation is first sealed into log events, appended to
//! `{root}/{namespace}/events.log` in one write, and only then folded into the
//! in-memory state. Writers are serialized; readers share a read lock.

pub mod chunk;
pub mod log;
pub mod state;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::conflict::{
    detect_indexed, ConflictFilter, ConflictRecord, ConflictState, Resolution, ResolutionAction,
    DEFAULT_CONTRADICTION_THRESHOLD,
};
use crate::embedder::{Embedder, HashEmbedder, DEFAULT_DIMENSION};
use crate::error::{MemError, Result};
use crate::its::{binarize, search_parallel, BinaryCode, RetrievalParams, ScoredHit};
use crate::model::{
    validate_namespace, MemoryRecord, MemoryType, Millis, Provenance, RecordId, RecordState,
    Session, HOUR_MS,
};
use crate::rng::{Clock, EntropySource, OsEntropy, SystemClock};

use self::log::{read_log, EventBody, EventLog, LogEvent, ResolvedPayload, TailTruncation, LOG_FILE};
pub use self::state::{replay, replay_onto, state_hash, Change, NamespaceState, RecordHistory, StoreSnapshot, Transition};

pub const DEFAULT_SESSION_MS: Millis = 6 * HOUR_MS;
const SNAPSHOT_PREFIX: &str = "snapshot-";

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    /// Data directory; `None` keeps everything in memory.
    pub root: Option<PathBuf>,
    pub dimension: usize,
    /// `None` turns write-time contradiction detection off.
    pub contradiction_threshold: Option<f64>,
    pub session_duration_ms: Millis,
    pub chunk_chars: usize,
    pub chunk_overlap: usize,
    pub search_workers: usize,
    /// fsync after every append.
    pub sync_writes: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            root: None,
            dimension: DEFAULT_DIMENSION,
            contradiction_threshold: Some(DEFAULT_CONTRADICTION_THRESHOLD),
            session_duration_ms: DEFAULT_SESSION_MS,
            chunk_chars: chunk::CHUNK_CHARS,
            chunk_overlap: chunk::CHUNK_OVERLAP,
            search_workers: 1,
            sync_writes: false,
        }
    }
}

impl StoreConfig {
    pub fn in_memory() -> Self {
        StoreConfig::default()
    }

    pub fn persistent(root: impl Into<PathBuf>) -> Self {
        StoreConfig { root: Some(root.into()), ..Default::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RememberRequest {
    pub namespace: String,
    pub content: String,
    #[serde(default, rename = "type")]
    pub memory_type: Option<MemoryType>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub at: Option<Millis>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RememberRequest {
    pub fn new(namespace: &str, content: &str) -> Self {
        RememberRequest { namespace: namespace.into(), content: content.into(), ..Default::default() }
    }

    pub fn typed(mut self, t: MemoryType) -> Self {
        self.memory_type = Some(t);
        self
    }

    pub fn at(mut self, t: Millis) -> Self {
        self.at = Some(t);
        self
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.tags.insert(tag.into());
        self
    }

    pub fn session(mut self, id: &str) -> Self {
        self.session_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteOutcome {
    /// One record per chunk, in content order.
    pub records: Vec<MemoryRecord>,
    pub conflicts: Vec<ConflictRecord>,
    pub session: Session,
}

impl WriteOutcome {
    pub fn record(&self) -> &MemoryRecord {
        &self.records[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveOutcome {
    pub conflict: ConflictRecord,
    pub new_record: MemoryRecord,
    pub candidates: Vec<MemoryRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Health {
    pub namespaces: usize,
    pub records: usize,
    pub open_conflicts: usize,
}

/// What opening a data directory found.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenReport {
    pub namespaces: usize,
    pub events: u64,
    pub truncations: Vec<(String, TailTruncation)>,
}

struct Namespace {
    state: NamespaceState,
    log: Option<EventLog>,
}

#[derive(Default)]
struct Inner {
    namespaces: BTreeMap<String, Namespace>,
    record_ns: HashMap<RecordId, String>,
    conflict_ns: HashMap<RecordId, String>,
}

pub struct StoreBuilder {
    config: StoreConfig,
    embedder: Option<Box<dyn Embedder>>,
    clock: Option<Arc<dyn Clock>>,
    entropy: Option<Box<dyn EntropySource>>,
}

impl StoreBuilder {
    pub fn embedder(mut self, e: Box<dyn Embedder>) -> Self {
        self.embedder = Some(e);
        self
    }

    pub fn clock(mut self, c: Arc<dyn Clock>) -> Self {
        self.clock = Some(c);
        self
    }

    pub fn entropy(mut self, e: Box<dyn EntropySource>) -> Self {
        self.entropy = Some(e);
        self
    }

    pub fn open(self) -> Result<MemoryStore> {
        let config = self.config;
        if config.dimension == 0 || !config.dimension.is_multiple_of(8) {
            return Err(MemError::InvalidConfig(format!(
                "dimension {} must be a positive multiple of 8",
                config.dimension
            )));
        }
        if let Some(t) = config.contradiction_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(MemError::InvalidConfig(format!("contradiction threshold {t}")));
            }
        }
        let embedder = match self.embedder {
            Some(e) => e,
            None => Box::new(HashEmbedder::new(config.dimension)?),
        };
        if embedder.dimension() != config.dimension {
            return Err(MemError::DimensionMismatch {
                expected: config.dimension,
                actual: embedder.dimension(),
            });
        }
        let mut inner = Inner::default();
        let report = match &config.root {
            Some(root) => load_root(root, &config, &mut inner)?,
            None => OpenReport::default(),
        };
        Ok(MemoryStore {
            config,
            embedder,
            clock: self.clock.unwrap_or_else(|| Arc::new(SystemClock)),
            entropy: Mutex::new(self.entropy.unwrap_or_else(|| Box::new(OsEntropy::default()))),
            inner: RwLock::new(inner),
            thresholds: RwLock::new(HashMap::new()),
            retrievals: AtomicU64::new(0),
            report,
        })
    }
}

pub struct MemoryStore {
    config: StoreConfig,
    embedder: Box<dyn Embedder>,
    clock: Arc<dyn Clock>,
    entropy: Mutex<Box<dyn EntropySource>>,
    inner: RwLock<Inner>,
    thresholds: RwLock<HashMap<String, Option<f64>>>,
    retrievals: AtomicU64,
    report: OpenReport,
}

fn load_root(root: &Path, config: &StoreConfig, inner: &mut Inner) -> Result<OpenReport> {
    std::fs::create_dir_all(root)?;
    let mut report = OpenReport::default();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(LOG_FILE).is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if validate_namespace(&name).is_err() {
            continue;
        }
        let contents = read_log(&dir.join(LOG_FILE))?;
        let mut state = latest_snapshot(&dir, contents.events.len() as u64)?
            .map(|s| NamespaceState::from_snapshot(&s))
            .transpose()?
            .unwrap_or_else(|| NamespaceState::new(&name, config.dimension));
        if state.dimension != config.dimension {
            return Err(MemError::DimensionMismatch {
                expected: config.dimension,
                actual: state.dimension,
            });
        }
        replay_onto(&mut state, &contents.events)?;
        let valid_len = match &contents.truncation {
            Some(t) => {
                report.truncations.push((name.clone(), t.clone()));
                t.valid_len
            }
            None => std::fs::metadata(dir.join(LOG_FILE))?.len(),
        };
        let log = EventLog::open(&dir.join(LOG_FILE), valid_len, config.sync_writes)?;
        report.namespaces += 1;
        report.events += contents.events.len() as u64;
        for r in state.records() {
            inner.record_ns.insert(r.id, name.clone());
        }
        for c in state.conflicts() {
            inner.conflict_ns.insert(c.conflict_id, name.clone());
        }
        inner.namespaces.insert(name, Namespace { state, log: Some(log) });
    }
    Ok(report)
}

/// Newest readable snapshot not beyond `max_seq`.
fn latest_snapshot(dir: &Path, max_seq: u64) -> Result<Option<StoreSnapshot>> {
    let mut found: Vec<(u64, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            let seq = name.strip_prefix(SNAPSHOT_PREFIX)?.strip_suffix(".json")?.parse().ok()?;
            Some((seq, e.path()))
        })
        .filter(|(seq, _)| *seq <= max_seq)
        .collect();
    found.sort_by_key(|f| std::cmp::Reverse(f.0));
    for (_, path) in found {
        if let Ok(snap) = read_snapshot_file(&path) {
            if state_hash(&snap.records).ok().as_deref() == Some(snap.state_hash.as_str()) {
                return Ok(Some(snap));
            }
        }
    }
    Ok(None)
}

/// Writes `snapshot-{seq}.json` into `dir` atomically.
pub fn write_snapshot_file(dir: &Path, snapshot: &StoreSnapshot) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{SNAPSHOT_PREFIX}{}.json", snapshot.as_of_seq));
    let tmp = dir.join(format!(".{SNAPSHOT_PREFIX}{}.tmp", snapshot.as_of_seq));
    std::fs::write(&tmp, crate::canonical::to_string(snapshot)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_snapshot_file(path: &Path) -> Result<StoreSnapshot> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MemError::StorageFailure(e.to_string()))
}

impl MemoryStore {
    pub fn builder(config: StoreConfig) -> StoreBuilder {
        StoreBuilder { config, embedder: None, clock: None, entropy: None }
    }

    pub fn open(config: StoreConfig) -> Result<Self> {
        MemoryStore::builder(config).open()
    }

    pub fn in_memory() -> Self {
        MemoryStore::open(StoreConfig::in_memory()).expect("default config is valid")
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn open_report(&self) -> &OpenReport {
        &self.report
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn set_search_workers(&mut self, workers: usize) {
        self.config.search_workers = workers.max(1);
    }

    /// Overrides the contradiction threshold for one namespace; `None` disables detection there.
    pub fn set_contradiction_threshold(&self, namespace: &str, threshold: Option<f64>) -> Result<()> {
        if let Some(t) = threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(MemError::InvalidParams(format!("contradiction threshold {t}")));
            }
        }
        self.thresholds.write().insert(namespace.to_string(), threshold);
        Ok(())
    }

    pub fn contradiction_threshold(&self, namespace: &str) -> Option<f64> {
        self.thresholds
            .read()
            .get(namespace)
            .copied()
            .unwrap_or(self.config.contradiction_threshold)
    }

    /// Number of retrieval queries issued since the store was opened.
    pub fn retrieval_count(&self) -> u64 {
        self.retrievals.load(Ordering::SeqCst)
    }

    /// Embeds and binarizes text with the store's embedder.
    pub fn encode(&self, text: &str) -> Result<BinaryCode> {
        let e = self.embedder.embed(text)?;
        binarize(&e, self.config.dimension)
    }

    fn fresh_id(&self, at: Millis, taken: &dyn Fn(RecordId) -> bool) -> Result<RecordId> {
        let mut entropy = self.entropy.lock();
        loop {
            let id = RecordId::new(at, entropy.next_entropy())?;
            if !taken(id) {
                return Ok(id);
            }
        }
    }

    /// Ingests content: chunk, embed, binarize, assign id and session, detect
    /// contradictions, append to the log. Never calls a language model.
    pub fn remember(&self, req: RememberRequest) -> Result<WriteOutcome> {
        validate_namespace(&req.namespace)?;
        if req.content.trim().is_empty() {
            return Err(MemError::EmptyContent);
        }
        let memory_type = req.memory_type.unwrap_or(MemoryType::Fact);
        let at = req.at.unwrap_or_else(|| self.clock.now_ms());
        RecordId::new(at, 0)?;

        let parts = chunk::chunk(&req.content, self.config.chunk_chars, self.config.chunk_overlap);
        let texts: Vec<&str> = parts.iter().map(String::as_str).collect();
        let embeddings = self.embedder.embed_batch(&texts).map_err(|e| e.root().clone())?;
        let codes = embeddings
            .iter()
            .map(|e| binarize(e, self.config.dimension))
            .collect::<Result<Vec<_>>>()?;
        let threshold = self.contradiction_threshold(&req.namespace);

        let mut guard = self.inner.write();
        let inner = &mut *guard;
        if !inner.namespaces.contains_key(&req.namespace) {
            let log = match &self.config.root {
                Some(root) => Some(EventLog::open(
                    &root.join(&req.namespace).join(LOG_FILE),
                    0,
                    self.config.sync_writes,
                )?),
                None => None,
            };
            let state = NamespaceState::new(&req.namespace, self.config.dimension);
            inner.namespaces.insert(req.namespace.clone(), Namespace { state, log });
        }
        let ns = inner.namespaces.get_mut(&req.namespace).expect("inserted above");
        let record_ns = &inner.record_ns;
        let conflict_ns = &inner.conflict_ns;
        let mut new_ids: HashSet<RecordId> = HashSet::new();

        let mut bodies: Vec<EventBody> = Vec::new();
        let session = match req.session_id.as_deref() {
            Some(id) => ns.state.session(id).cloned(),
            None => ns.state.session_covering(at).cloned(),
        };
        let session = match session {
            Some(s) => s,
            None => {
                let session_id = match &req.session_id {
                    Some(id) => id.clone(),
                    None => self.fresh_id(at, &|id| ns.state.session(&id.to_hex()).is_some())?.to_hex(),
                };
                let s = Session {
                    session_id,
                    namespace: req.namespace.clone(),
                    start: at,
                    end: at + self.config.session_duration_ms,
                };
                bodies.push(EventBody::SessionOpened { session: s.clone() });
                s
            }
        };

        let mut records = Vec::with_capacity(codes.len());
        let mut conflicts = Vec::new();
        for (content, code) in parts.into_iter().zip(codes) {
            let taken = |id: RecordId| {
                record_ns.contains_key(&id) || conflict_ns.contains_key(&id) || new_ids.contains(&id)
            };
            let id = self.fresh_id(at, &taken)?;
            new_ids.insert(id);
            let mut record = MemoryRecord {
                id,
                namespace: req.namespace.clone(),
                session_id: session.session_id.clone(),
                memory_type,
                content,
                tags: req.tags.clone(),
                code,
                created_at: at,
                superseded_at: None,
                state: RecordState::Active,
                superseded_by: None,
                conflict_flag: false,
                provenance: req.provenance,
            };
            let candidates = match threshold {
                Some(t) => detect_indexed(&record, ns.state.scan_index(), ns.state.records(), ns.state.stats(), t)?,
                None => Vec::new(),
            };
            let conflict = if candidates.is_empty() {
                None
            } else {
                record.state = RecordState::Provisional;
                let taken = |id: RecordId| {
                    record_ns.contains_key(&id) || conflict_ns.contains_key(&id) || new_ids.contains(&id)
                };
                let conflict_id = self.fresh_id(at, &taken)?;
                new_ids.insert(conflict_id);
                Some(ConflictRecord {
                    conflict_id,
                    namespace: req.namespace.clone(),
                    new_record: id,
                    candidates,
                    opened_at: at,
                    threshold: threshold.unwrap_or_default(),
                    state: ConflictState::Open,
                    resolution: None,
                })
            };
            bodies.push(EventBody::RecordWritten { record: record.clone() });
            if let Some(c) = conflict {
                bodies.push(EventBody::ConflictOpened { conflict: c.clone() });
                conflicts.push(c);
            }
            records.push(record);
        }

        commit(ns, at, &bodies)?;
        for r in &records {
            inner.record_ns.insert(r.id, req.namespace.clone());
        }
        for c in &conflicts {
            inner.conflict_ns.insert(c.conflict_id, req.namespace.clone());
        }
        Ok(WriteOutcome { records, conflicts, session })
    }

    /// One retrieval query over a namespace.
    pub fn recall(&self, namespace: &str, query: &str, params: &RetrievalParams) -> Result<Vec<ScoredHit>> {
        params.validate()?;
        let code = self.encode(query)?;
        self.retrievals.fetch_add(1, Ordering::SeqCst);
        self.search_code(namespace, &code, params, self.config.search_workers)
    }

    /// Search with a precomputed query code and an explicit worker count.
    pub fn search_code(
        &self,
        namespace: &str,
        code: &BinaryCode,
        params: &RetrievalParams,
        workers: usize,
    ) -> Result<Vec<ScoredHit>> {
        let now = self.clock.now_ms();
        let inner = self.inner.read();
        let Some(ns) = inner.namespaces.get(namespace) else {
            params.validate()?;
            return Ok(Vec::new());
        };
        // Point-in-time queries search the records as they stood at `t`.
        let versions = params.as_of.map(|t| ns.state.as_of(t));
        let candidates: Vec<&MemoryRecord> = match &versions {
            Some(v) => v.iter().collect(),
            None => ns.state.records().iter().collect(),
        };
        search_parallel(code, &candidates, params, ns.state.stats(), now, workers)
    }

    pub fn get(&self, id: RecordId) -> Option<MemoryRecord> {
        let inner = self.inner.read();
        let ns = inner.record_ns.get(&id)?;
        inner.namespaces.get(ns)?.state.record(id).cloned()
    }

    pub fn conflict(&self, id: RecordId) -> Option<ConflictRecord> {
        let inner = self.inner.read();
        let ns = inner.conflict_ns.get(&id)?;
        inner.namespaces.get(ns)?.state.conflict(id).cloned()
    }

    /// Runs `f` against a namespace's state under the read lock.
    pub fn with_namespace<R>(&self, namespace: &str, f: impl FnOnce(&NamespaceState) -> R) -> Option<R> {
        let inner = self.inner.read();
        inner.namespaces.get(namespace).map(|ns| f(&ns.state))
    }

    pub fn namespaces(&self) -> Vec<String> {
        self.inner.read().namespaces.keys().cloned().collect()
    }

    pub fn as_of(&self, namespace: &str, t: Millis) -> Vec<MemoryRecord> {
        self.with_namespace(namespace, |s| s.as_of(t)).unwrap_or_default()
    }

    pub fn changed_since(&self, namespace: &str, t0: Millis, t1: Option<Millis>) -> Result<Vec<MemoryRecord>> {
        if let Some(end) = t1 {
            if end < t0 {
                return Err(MemError::InvalidRange(format!("until {end} precedes since {t0}")));
            }
        }
        self.with_namespace(namespace, |s| s.changed_since(t0, t1))
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    pub fn sessions(&self, namespace: &str) -> Vec<Session> {
        let mut out = self.with_namespace(namespace, |s| s.sessions().to_vec()).unwrap_or_default();
        out.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.session_id.cmp(&b.session_id)));
        out
    }

    pub fn list_conflicts(&self, namespace: &str, filter: ConflictFilter) -> Vec<ConflictRecord> {
        self.with_namespace(namespace, |s| s.list_conflicts(filter)).unwrap_or_default()
    }

    pub fn health(&self) -> Health {
        let inner = self.inner.read();
        inner.namespaces.values().fold(
            Health { namespaces: inner.namespaces.len(), ..Default::default() },
            |mut h, ns| {
                h.records += ns.state.records().len();
                h.open_conflicts += ns.state.open_conflicts();
                h
            },
        )
    }

    pub fn snapshot(&self, namespace: &str) -> Result<StoreSnapshot> {
        self.with_namespace(namespace, |s| s.snapshot())
            .ok_or_else(|| MemError::NotFound(format!("namespace {namespace}")))?
    }

    pub fn state_hash(&self, namespace: &str) -> Result<String> {
        match self.with_namespace(namespace, |s| s.state_hash()) {
            Some(h) => h,
            None => state_hash(&[]),
        }
    }

    /// Writes `{root}/{namespace}/snapshot-{seq}.json`.
    pub fn write_snapshot(&self, namespace: &str) -> Result<PathBuf> {
        let root = self
            .config
            .root
            .as_ref()
            .ok_or_else(|| MemError::StorageFailure("store has no data directory".into()))?;
        let snap = self.snapshot(namespace)?;
        write_snapshot_file(&root.join(namespace), &snap)
    }

    /// Non-destructive replacement of `old_id` by `new_id`.
    pub fn apply_supersession(&self, old_id: RecordId, new_id: RecordId, at: Option<Millis>) -> Result<Vec<MemoryRecord>> {
        let at = at.unwrap_or_else(|| self.clock.now_ms());
        let mut guard = self.inner.write();
        let inner = &mut *guard;
        let old_ns = inner.record_ns.get(&old_id).ok_or_else(|| MemError::NotFound(old_id.to_hex()))?;
        let new_ns = inner.record_ns.get(&new_id).ok_or_else(|| MemError::NotFound(new_id.to_hex()))?;
        if old_ns != new_ns {
            return Err(MemError::IllegalTransition("records live in different namespaces".into()));
        }
        let ns = inner.namespaces.get_mut(&old_ns.clone()).expect("indexed namespace exists");
        let old = ns.state.record(old_id).expect("indexed record exists");
        let new = ns.state.record(new_id).expect("indexed record exists");
        if old_id == new_id {
            return Err(MemError::IllegalTransition("a record cannot supersede itself".into()));
        }
        if !matches!(old.state, RecordState::Active | RecordState::Provisional) {
            return Err(MemError::IllegalTransition(format!(
                "cannot supersede a {} record",
                old.state.as_str()
            )));
        }
        if !matches!(new.state, RecordState::Active | RecordState::Provisional) {
            return Err(MemError::IllegalTransition(format!(
                "a {} record cannot supersede another",
                new.state.as_str()
            )));
        }
        if at < old.created_at {
            return Err(MemError::IllegalTransition("supersession precedes creation".into()));
        }
        commit(ns, at, &[EventBody::RecordSuperseded { old_id, new_id }])?;
        Ok(vec![
            ns.state.record(old_id).cloned().expect("exists"),
            ns.state.record(new_id).cloned().expect("exists"),
        ])
    }

    /// Applies a resolution action to an open conflict.
    pub fn resolve(
        &self,
        conflict_id: RecordId,
        action: ResolutionAction,
        actor: &str,
        target: Option<RecordId>,
        at: Option<Millis>,
    ) -> Result<ResolveOutcome> {
        let at = at.unwrap_or_else(|| self.clock.now_ms());
        let mut guard = self.inner.write();
        let inner = &mut *guard;
        let ns_name = inner
            .conflict_ns
            .get(&conflict_id)
            .ok_or_else(|| MemError::NotFound(format!("conflict {conflict_id}")))?
            .clone();
        let ns = inner.namespaces.get_mut(&ns_name).expect("indexed namespace exists");
        let conflict = ns.state.conflict(conflict_id).expect("indexed conflict exists").clone();
        if !conflict.is_open() {
            return Err(MemError::AlreadyResolved(conflict_id.to_hex()));
        }
        let new = ns.state.record(conflict.new_record).expect("conflict record exists");
        if !matches!(new.state, RecordState::Active | RecordState::Provisional) {
            return Err(MemError::IllegalTransition(format!(
                "new record is already {}",
                new.state.as_str()
            )));
        }
        if at < new.created_at {
            return Err(MemError::IllegalTransition("resolution precedes the write".into()));
        }
        let in_scope: Vec<RecordId> = match target {
            Some(t) if conflict.candidates.iter().any(|c| c.id == t) => vec![t],
            Some(t) => {
                return Err(MemError::InvalidParams(format!("{t} is not a candidate of this conflict")))
            }
            None => conflict.candidates.iter().map(|c| c.id).collect(),
        };
        let (superseded, flagged) = match action {
            ResolutionAction::Supersede => {
                let live: Vec<RecordId> = in_scope
                    .into_iter()
                    .filter(|id| {
                        ns.state.record(*id).is_some_and(|r| {
                            matches!(r.state, RecordState::Active | RecordState::Provisional)
                        })
                    })
                    .collect();
                if live.iter().any(|id| ns.state.record(*id).is_some_and(|r| at < r.created_at)) {
                    return Err(MemError::IllegalTransition("supersession precedes creation".into()));
                }
                (live, Vec::new())
            }
            ResolutionAction::Retain => (Vec::new(), Vec::new()),
            ResolutionAction::Annotate => {
                let mut flagged = vec![conflict.new_record];
                flagged.extend(in_scope);
                (Vec::new(), flagged)
            }
        };
        let payload = ResolvedPayload {
            conflict_id,
            resolution: Resolution { action, target, at, actor: actor.to_string() },
            superseded,
            flagged,
        };
        commit(ns, at, &[EventBody::ConflictResolved(payload)])?;
        let conflict = ns.state.conflict(conflict_id).cloned().expect("exists");
        Ok(ResolveOutcome {
            new_record: ns.state.record(conflict.new_record).cloned().expect("exists"),
            candidates: conflict
                .candidates
                .iter()
                .filter_map(|c| ns.state.record(c.id).cloned())
                .collect(),
            conflict,
        })
    }
}

/// Seals, appends and applies a batch of events as one log write.
fn commit(ns: &mut Namespace, at: Millis, bodies: &[EventBody]) -> Result<()> {
    let mut events: Vec<LogEvent> = Vec::with_capacity(bodies.len());
    let mut prev = ns.state.last_hash().to_string();
    let mut seq = ns.state.seq();
    for body in bodies {
        seq += 1;
        let ev = LogEvent::seal(seq, at, body, &prev)?;
        prev = ev.hash.clone();
        events.push(ev);
    }
    if let Some(log) = ns.log.as_mut() {
        log.append(&events)?;
    }
    for ev in &events {
        ns.state.apply(ev)?;
    }
    Ok(())
}
