//! In-memory namespace state as a left fold over log events.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::log::{EventBody, LogEvent, ResolvedPayload, GENESIS_HASH};
use crate::canonical;
use crate::conflict::{ConflictFilter, ConflictRecord, ConflictState, ResolutionAction, ScanIndex};
use crate::error::{MemError, Result};
use crate::its::BitStats;
use crate::model::{MemoryRecord, Millis, RecordId, RecordState, Session};

/// One lifecycle change after the write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum Change {
    Activated,
    Superseded { by: RecordId },
    Retired,
    Flagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: Millis,
    #[serde(flatten)]
    pub change: Change,
}

/// Lifecycle of one record: the state it was written in plus every later
/// change in event order. Folding the changes up to `t` rebuilds the record
/// as it stood at `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHistory {
    pub initial: RecordState,
    pub transitions: Vec<Transition>,
}

impl RecordHistory {
    pub fn new(initial: RecordState) -> Self {
        RecordHistory { initial, transitions: Vec::new() }
    }

    pub fn retired_at(&self) -> Option<Millis> {
        self.transitions.iter().find(|t| t.change == Change::Retired).map(|t| t.at)
    }

    /// Latest creation or change time inside `[t0, t1)`.
    pub fn last_change_in(&self, created_at: Millis, t0: Millis, t1: Option<Millis>) -> Option<Millis> {
        std::iter::once(created_at)
            .chain(self.transitions.iter().map(|t| t.at))
            .filter(|&t| t >= t0 && t1.is_none_or(|end| t < end))
            .max()
    }

    /// `current` as it stood at `t`, or `None` before its creation.
    pub fn version_at(&self, current: &MemoryRecord, t: Millis) -> Option<MemoryRecord> {
        if current.created_at > t {
            return None;
        }
        let mut r = current.clone();
        r.state = self.initial;
        r.superseded_at = None;
        r.superseded_by = None;
        r.conflict_flag = false;
        for tr in self.transitions.iter().filter(|tr| tr.at <= t) {
            match tr.change {
                Change::Activated => r.state = RecordState::Active,
                Change::Superseded { by } => {
                    r.state = RecordState::Superseded;
                    r.superseded_at = Some(tr.at);
                    r.superseded_by = Some(by);
                }
                Change::Retired => r.state = RecordState::Retired,
                Change::Flagged => r.conflict_flag = true,
            }
        }
        Some(r)
    }
}

#[derive(Debug, Clone)]
pub struct NamespaceState {
    pub name: String,
    pub dimension: usize,
    records: Vec<MemoryRecord>,
    scan: ScanIndex,
    index: HashMap<RecordId, usize>,
    history: Vec<RecordHistory>,
    stats: BitStats,
    sessions: Vec<Session>,
    conflicts: Vec<ConflictRecord>,
    conflict_index: HashMap<RecordId, usize>,
    open_conflicts: usize,
    seq: u64,
    last_hash: String,
}

/// Full namespace state at a log position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub namespace: String,
    pub dimension: usize,
    pub as_of_seq: u64,
    pub last_hash: String,
    pub records: Vec<MemoryRecord>,
    pub history: Vec<RecordHistory>,
    pub stats: BitStats,
    pub sessions: Vec<Session>,
    pub conflicts: Vec<ConflictRecord>,
    pub state_hash: String,
}

/// SHA-256 over the canonical JSON array of `records` sorted by id.
pub fn state_hash(records: &[MemoryRecord]) -> Result<String> {
    let mut sorted: Vec<&MemoryRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    Ok(canonical::sha256_hex(canonical::to_string(&sorted)?.as_bytes()))
}

fn corrupt(seq: u64, reason: impl Into<String>) -> MemError {
    MemError::CorruptLog { seq, reason: reason.into() }
}

impl NamespaceState {
    pub fn new(name: &str, dimension: usize) -> Self {
        NamespaceState {
            name: name.to_string(),
            dimension,
            records: Vec::new(),
            scan: ScanIndex::new(dimension),
            index: HashMap::new(),
            history: Vec::new(),
            stats: BitStats::new(dimension),
            sessions: Vec::new(),
            conflicts: Vec::new(),
            conflict_index: HashMap::new(),
            open_conflicts: 0,
            seq: 0,
            last_hash: GENESIS_HASH.to_string(),
        }
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn scan_index(&self) -> &ScanIndex {
        &self.scan
    }

    pub fn record(&self, id: RecordId) -> Option<&MemoryRecord> {
        self.index.get(&id).map(|&i| &self.records[i])
    }

    pub fn history(&self, id: RecordId) -> Option<&RecordHistory> {
        self.index.get(&id).map(|&i| &self.history[i])
    }

    pub fn stats(&self) -> &BitStats {
        &self.stats
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn conflicts(&self) -> &[ConflictRecord] {
        &self.conflicts
    }

    pub fn conflict(&self, id: RecordId) -> Option<&ConflictRecord> {
        self.conflict_index.get(&id).map(|&i| &self.conflicts[i])
    }

    pub fn open_conflicts(&self) -> usize {
        self.open_conflicts
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn last_hash(&self) -> &str {
        &self.last_hash
    }

    /// Latest-starting session whose window covers `t`.
    pub fn session_covering(&self, t: Millis) -> Option<&Session> {
        self.sessions.iter().filter(|s| s.covers(t)).max_by_key(|s| s.start)
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.session_id == id)
    }

    /// Applies one verified event. Fails without partial effects when the
    /// event references state that does not exist.
    pub fn apply(&mut self, event: &LogEvent) -> Result<()> {
        let seq = event.seq;
        if seq != self.seq + 1 {
            return Err(corrupt(seq, format!("expected seq {}", self.seq + 1)));
        }
        match event.body()? {
            EventBody::RecordWritten { record } => {
                if self.index.contains_key(&record.id) {
                    return Err(corrupt(seq, format!("duplicate record {}", record.id)));
                }
                if record.namespace != self.name {
                    return Err(corrupt(seq, "record belongs to another namespace"));
                }
                self.stats.update(&record.code).map_err(|e| corrupt(seq, e.to_string()))?;
                self.index.insert(record.id, self.records.len());
                self.history.push(RecordHistory::new(record.state));
                self.scan.push(&record);
                self.records.push(record);
            }
            EventBody::ConflictOpened { conflict } => {
                if self.conflict_index.contains_key(&conflict.conflict_id) {
                    return Err(corrupt(seq, "duplicate conflict"));
                }
                if !self.index.contains_key(&conflict.new_record) {
                    return Err(corrupt(seq, "conflict references unknown record"));
                }
                if conflict.is_open() {
                    self.open_conflicts += 1;
                }
                self.conflict_index.insert(conflict.conflict_id, self.conflicts.len());
                self.conflicts.push(conflict);
            }
            EventBody::ConflictResolved(p) => self.apply_resolution(seq, &p)?,
            EventBody::SessionOpened { session } => {
                if self.session(&session.session_id).is_some() {
                    return Err(corrupt(seq, "duplicate session"));
                }
                self.sessions.push(session);
            }
            EventBody::RecordSuperseded { old_id, new_id } => {
                self.check_known(seq, &[old_id, new_id])?;
                self.supersede(old_id, new_id, event.at);
                self.activate(new_id, event.at);
            }
        }
        self.seq = seq;
        self.last_hash = event.hash.clone();
        Ok(())
    }

    fn check_known(&self, seq: u64, ids: &[RecordId]) -> Result<()> {
        match ids.iter().find(|id| !self.index.contains_key(id)) {
            Some(id) => Err(corrupt(seq, format!("unknown record {id}"))),
            None => Ok(()),
        }
    }

    fn apply_resolution(&mut self, seq: u64, p: &ResolvedPayload) -> Result<()> {
        let ci = *self
            .conflict_index
            .get(&p.conflict_id)
            .ok_or_else(|| corrupt(seq, "resolution of unknown conflict"))?;
        if !self.conflicts[ci].is_open() {
            return Err(corrupt(seq, "conflict resolved twice"));
        }
        let new_id = self.conflicts[ci].new_record;
        self.check_known(seq, &p.superseded)?;
        self.check_known(seq, &p.flagged)?;
        let at = p.resolution.at;
        match p.resolution.action {
            ResolutionAction::Supersede => {
                for &old in &p.superseded {
                    self.supersede(old, new_id, at);
                }
                self.activate(new_id, at);
            }
            ResolutionAction::Retain => {
                let i = self.index[&new_id];
                self.records[i].state = RecordState::Retired;
                self.scan.set_state(i, RecordState::Retired);
                self.history[i].transitions.push(Transition { at, change: Change::Retired });
            }
            ResolutionAction::Annotate => self.activate(new_id, at),
        }
        for &id in &p.flagged {
            let i = self.index[&id];
            if !self.records[i].conflict_flag {
                self.records[i].conflict_flag = true;
                self.history[i].transitions.push(Transition { at, change: Change::Flagged });
            }
        }
        let c = &mut self.conflicts[ci];
        c.state = ConflictState::Resolved;
        c.resolution = Some(p.resolution.clone());
        self.open_conflicts -= 1;
        Ok(())
    }

    fn supersede(&mut self, old: RecordId, new: RecordId, at: Millis) {
        let i = self.index[&old];
        let r = &mut self.records[i];
        r.state = RecordState::Superseded;
        self.scan.set_state(i, RecordState::Superseded);
        r.superseded_at = Some(at);
        r.superseded_by = Some(new);
        self.history[i].transitions.push(Transition { at, change: Change::Superseded { by: new } });
    }

    fn activate(&mut self, id: RecordId, at: Millis) {
        let i = self.index[&id];
        if self.records[i].state == RecordState::Provisional {
            self.records[i].state = RecordState::Active;
            self.scan.set_state(i, RecordState::Active);
            self.history[i].transitions.push(Transition { at, change: Change::Activated });
        }
    }

    pub fn snapshot(&self) -> Result<StoreSnapshot> {
        Ok(StoreSnapshot {
            namespace: self.name.clone(),
            dimension: self.dimension,
            as_of_seq: self.seq,
            last_hash: self.last_hash.clone(),
            records: self.records.clone(),
            history: self.history.clone(),
            stats: self.stats.clone(),
            sessions: self.sessions.clone(),
            conflicts: self.conflicts.clone(),
            state_hash: state_hash(&self.records)?,
        })
    }

    pub fn state_hash(&self) -> Result<String> {
        state_hash(&self.records)
    }

    /// Rebuilds state from a snapshot, checking its hash.
    pub fn from_snapshot(snap: &StoreSnapshot) -> Result<Self> {
        if state_hash(&snap.records)? != snap.state_hash {
            return Err(corrupt(snap.as_of_seq, "snapshot state hash mismatch"));
        }
        if snap.history.len() != snap.records.len() {
            return Err(corrupt(snap.as_of_seq, "snapshot history length mismatch"));
        }
        let index = snap.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        if snap.records.iter().any(|r| r.code.dimension() != snap.dimension) {
            return Err(corrupt(snap.as_of_seq, "snapshot record of another dimension"));
        }
        let mut scan = ScanIndex::new(snap.dimension);
        snap.records.iter().for_each(|r| scan.push(r));
        let conflict_index =
            snap.conflicts.iter().enumerate().map(|(i, c)| (c.conflict_id, i)).collect();
        Ok(NamespaceState {
            name: snap.namespace.clone(),
            dimension: snap.dimension,
            records: snap.records.clone(),
            scan,
            index,
            history: snap.history.clone(),
            stats: snap.stats.clone(),
            sessions: snap.sessions.clone(),
            open_conflicts: snap.conflicts.iter().filter(|c| c.is_open()).count(),
            conflicts: snap.conflicts.clone(),
            conflict_index,
            seq: snap.as_of_seq,
            last_hash: snap.last_hash.clone(),
        })
    }

    /// Records live (active or provisional) at `t`, each rebuilt as it stood
    /// then, sorted by id.
    pub fn as_of(&self, t: Millis) -> Vec<MemoryRecord> {
        let mut out: Vec<MemoryRecord> = self
            .records
            .iter()
            .zip(&self.history)
            .filter_map(|(r, h)| h.version_at(r, t))
            .filter(|v| matches!(v.state, RecordState::Active | RecordState::Provisional))
            .collect();
        out.sort_by_key(|r| r.id);
        out
    }

    /// `id` as it stood at `t`.
    pub fn version_at(&self, id: RecordId, t: Millis) -> Option<MemoryRecord> {
        let &i = self.index.get(&id)?;
        self.history[i].version_at(&self.records[i], t)
    }

    /// Records created or transitioned within `[t0, t1)`, ordered by their
    /// latest change inside the window, then id.
    pub fn changed_since(&self, t0: Millis, t1: Option<Millis>) -> Result<Vec<MemoryRecord>> {
        if let Some(end) = t1 {
            if end < t0 {
                return Err(MemError::InvalidRange(format!("until {end} precedes since {t0}")));
            }
        }
        let mut hits: Vec<(Millis, &MemoryRecord)> = self
            .records
            .iter()
            .zip(&self.history)
            .filter_map(|(r, h)| h.last_change_in(r.created_at, t0, t1).map(|t| (t, r)))
            .collect();
        hits.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(hits.into_iter().map(|(_, r)| r.clone()).collect())
    }

    pub fn list_conflicts(&self, filter: ConflictFilter) -> Vec<ConflictRecord> {
        let mut out: Vec<ConflictRecord> =
            self.conflicts.iter().filter(|c| filter.admits(c)).cloned().collect();
        crate::conflict::sort_conflicts(&mut out);
        out
    }
}

/// Pure left fold from an empty namespace.
pub fn replay(namespace: &str, dimension: usize, events: &[LogEvent]) -> Result<StoreSnapshot> {
    let mut state = NamespaceState::new(namespace, dimension);
    replay_onto(&mut state, events)?;
    state.snapshot()
}

/// Continues a fold from `state` with the events after its position.
pub fn replay_onto(state: &mut NamespaceState, events: &[LogEvent]) -> Result<()> {
    let start = state.seq();
    for ev in events.iter().filter(|e| e.seq > start) {
        let prev = state.last_hash().to_string();
        ev.verify(state.seq() + 1, &prev)?;
        state.apply(ev)?;
    }
    Ok(())
}
