//! Write-time contradiction detection and the three resolution actions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MemError, Result};
use crate::its::{hit_order, BitStats, WeightTable};
use crate::model::{MemoryRecord, MemoryType, Millis, RecordId, RecordState};

/// Default ITS level at or above which a same-type active record is reported
/// as a possible contradiction. Set for recall: one-token paraphrases can
/// fall to about 0.94 in template-heavy namespaces, while unrelated short
/// sentences often score above 0.95, so no level separates the two. Raise it
/// per namespace for fewer, surer flags. See `tests/calibration.rs`.
pub const DEFAULT_CONTRADICTION_THRESHOLD: f64 = 0.90;

/// Upper bound on candidates attached to one conflict.
pub const MAX_CANDIDATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictCandidate {
    pub id: RecordId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictState {
    Open,
    Resolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionAction {
    /// Replace the older memories with the new one.
    Supersede,
    /// Keep the older memories; the new one is retired.
    Retain,
    /// Keep both, flagged for human review.
    Annotate,
}

impl ResolutionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionAction::Supersede => "supersede",
            ResolutionAction::Retain => "retain",
            ResolutionAction::Annotate => "annotate",
        }
    }
}

impl fmt::Display for ResolutionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResolutionAction {
    type Err = MemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "supersede" => Ok(ResolutionAction::Supersede),
            "retain" => Ok(ResolutionAction::Retain),
            "annotate" => Ok(ResolutionAction::Annotate),
            other => Err(MemError::InvalidParams(format!("unknown resolution action `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub action: ResolutionAction,
    pub target: Option<RecordId>,
    pub at: Millis,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub conflict_id: RecordId,
    pub namespace: String,
    pub new_record: RecordId,
    pub candidates: Vec<ConflictCandidate>,
    pub opened_at: Millis,
    /// Threshold in force when the conflict was detected.
    pub threshold: f64,
    pub state: ConflictState,
    pub resolution: Option<Resolution>,
}

impl ConflictRecord {
    pub fn is_open(&self) -> bool {
        self.state == ConflictState::Open
    }

    pub fn is_consistent(&self) -> bool {
        !self.candidates.is_empty()
            && self.candidates.len() <= MAX_CANDIDATES
            && self.candidates.iter().all(|c| c.score >= self.threshold)
            && (self.state == ConflictState::Resolved) == self.resolution.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictFilter {
    Open,
    Resolved,
    #[default]
    All,
}

impl ConflictFilter {
    pub fn admits(self, c: &ConflictRecord) -> bool {
        match self {
            ConflictFilter::Open => c.state == ConflictState::Open,
            ConflictFilter::Resolved => c.state == ConflictState::Resolved,
            ConflictFilter::All => true,
        }
    }
}

impl FromStr for ConflictFilter {
    type Err = MemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "open" => Ok(ConflictFilter::Open),
            "resolved" => Ok(ConflictFilter::Resolved),
            "all" | "" => Ok(ConflictFilter::All),
            other => Err(MemError::InvalidParams(format!("unknown conflict state `{other}`"))),
        }
    }
}

/// Scores `new_record` against every active record of the same namespace and
/// type in `existing`, keeping those at or above `threshold`, best five first.
pub fn detect<'a, I>(
    new_record: &MemoryRecord,
    existing: I,
    stats: &BitStats,
    threshold: f64,
) -> Result<Vec<ConflictCandidate>>
where
    I: IntoIterator<Item = &'a MemoryRecord>,
{
    let table = WeightTable::from_stats(stats)?;
    let code = new_record.code.bytes();
    let mut hits: Vec<(f64, &MemoryRecord)> = Vec::new();
    for r in existing {
        if r.state != RecordState::Active
            || r.memory_type != new_record.memory_type
            || r.namespace != new_record.namespace
            || r.id == new_record.id
        {
            continue;
        }
        if r.code.dimension() != new_record.code.dimension() {
            return Err(MemError::DimensionMismatch {
                expected: new_record.code.dimension(),
                actual: r.code.dimension(),
            });
        }
        let score = table.score_bytes(code, r.code.bytes());
        if score >= threshold {
            hits.push((score, r));
        }
    }
    hits.sort_unstable_by(|a, b| hit_order(*a, *b));
    hits.truncate(MAX_CANDIDATES);
    Ok(hits.into_iter().map(|(score, r)| ConflictCandidate { id: r.id, score }).collect())
}

/// What detection reads per record, packed contiguously and kept in step with
/// the namespace's records so a scan stays in cache at desk scale.
#[derive(Debug, Clone, Default)]
pub struct ScanIndex {
    stride: usize,
    codes: Vec<u8>,
    keys: Vec<(MemoryType, RecordState)>,
}

impl ScanIndex {
    pub fn new(dimension: usize) -> Self {
        ScanIndex { stride: dimension / 8, ..Default::default() }
    }

    pub fn push(&mut self, r: &MemoryRecord) {
        debug_assert_eq!(r.code.bytes().len(), self.stride);
        self.codes.extend_from_slice(r.code.bytes());
        self.keys.push((r.memory_type, r.state));
    }

    pub fn set_state(&mut self, i: usize, state: RecordState) {
        self.keys[i].1 = state;
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Same result as [`detect`] over `records`, which `index` mirrors and which
/// all belong to the new record's namespace.
pub fn detect_indexed(
    new_record: &MemoryRecord,
    index: &ScanIndex,
    records: &[MemoryRecord],
    stats: &BitStats,
    threshold: f64,
) -> Result<Vec<ConflictCandidate>> {
    debug_assert_eq!(index.len(), records.len());
    let code = new_record.code.bytes();
    if code.len() != index.stride {
        return Err(MemError::DimensionMismatch { expected: index.stride * 8, actual: code.len() * 8 });
    }
    let table = WeightTable::from_stats(stats)?;
    let mut limit = table.miss_limit(threshold);
    // Best hits so far in result order, at most MAX_CANDIDATES.
    let mut top: Vec<(u64, f64, &MemoryRecord)> = Vec::with_capacity(MAX_CANDIDATES + 1);
    let wanted = (new_record.memory_type, RecordState::Active);
    for (i, (key, d)) in index.keys.iter().zip(index.codes.chunks_exact(index.stride)).enumerate() {
        if *key != wanted {
            continue;
        }
        let Some(miss) = table.miss_within(code, d, limit) else { continue };
        let score = table.score_from_miss(miss);
        let r = &records[i];
        if score < threshold || r.id == new_record.id {
            continue;
        }
        let at = top.partition_point(|&(_, s, t)| hit_order((s, t), (score, r)).is_lt());
        if at == MAX_CANDIDATES {
            continue;
        }
        top.insert(at, (miss, score, r));
        if top.len() > MAX_CANDIDATES {
            top.pop();
        }
        if top.len() == MAX_CANDIDATES {
            // Equal mismatches can still win on recency or id.
            limit = limit.min(top[MAX_CANDIDATES - 1].0);
        }
    }
    Ok(top.into_iter().map(|(_, score, r)| ConflictCandidate { id: r.id, score }).collect())
}

/// Orders a conflict queue: newest first, ties by id.
pub fn sort_conflicts(list: &mut [ConflictRecord]) {
    list.sort_by(|a, b| b.opened_at.cmp(&a.opened_at).then_with(|| a.conflict_id.cmp(&b.conflict_id)));
}
