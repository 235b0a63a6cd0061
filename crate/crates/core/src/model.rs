//! Shared domain vocabulary: memory types, record identifiers, records and sessions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MemError, Result};
use crate::its::BinaryCode;

/// UTC milliseconds since the Unix epoch.
pub type Millis = u64;

pub const HOUR_MS: Millis = 3_600_000;
pub const DAY_MS: Millis = 24 * HOUR_MS;

/// Cognitive kind of a memory category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Episodic,
    Semantic,
    Procedural,
}

/// The closed table of built-in memory categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemoryType {
    Fact,
    Preference,
    Decision,
    Commitment,
    Goal,
    Constraint,
    Relationship,
    Identity,
    Context,
    Event,
    Feedback,
    Procedure,
    Skill,
}

impl MemoryType {
    pub const ALL: [MemoryType; 13] = [
        MemoryType::Fact,
        MemoryType::Preference,
        MemoryType::Decision,
        MemoryType::Commitment,
        MemoryType::Goal,
        MemoryType::Constraint,
        MemoryType::Relationship,
        MemoryType::Identity,
        MemoryType::Context,
        MemoryType::Event,
        MemoryType::Feedback,
        MemoryType::Procedure,
        MemoryType::Skill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MemoryType::Fact => "fact",
            MemoryType::Preference => "preference",
            MemoryType::Decision => "decision",
            MemoryType::Commitment => "commitment",
            MemoryType::Goal => "goal",
            MemoryType::Constraint => "constraint",
            MemoryType::Relationship => "relationship",
            MemoryType::Identity => "identity",
            MemoryType::Context => "context",
            MemoryType::Event => "event",
            MemoryType::Feedback => "feedback",
            MemoryType::Procedure => "procedure",
            MemoryType::Skill => "skill",
        }
    }

    pub fn kind(self) -> MemoryKind {
        match self {
            MemoryType::Event | MemoryType::Feedback => MemoryKind::Episodic,
            MemoryType::Procedure | MemoryType::Skill => MemoryKind::Procedural,
            _ => MemoryKind::Semantic,
        }
    }

    /// Metadata only; never folded into retrieval scores.
    pub fn priority(self) -> u8 {
        match self {
            MemoryType::Commitment | MemoryType::Constraint | MemoryType::Decision => 5,
            MemoryType::Goal | MemoryType::Preference | MemoryType::Fact | MemoryType::Identity => 4,
            _ => 3,
        }
    }

    /// Position in [`MemoryType::ALL`]; used for bitmask filters.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Case-insensitive lookup by name.
    pub fn from_name(name: &str) -> Result<Self> {
        let folded = name.trim().to_lowercase();
        MemoryType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == folded)
            .ok_or_else(|| MemError::UnknownType(name.to_string()))
    }
}

impl fmt::Display for MemoryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MemoryType {
    type Err = MemError;

    fn from_str(s: &str) -> Result<Self> {
        MemoryType::from_name(s)
    }
}

impl Serialize for MemoryType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MemoryType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        MemoryType::from_name(&s).map_err(serde::de::Error::custom)
    }
}

/// 128-bit identifier: creation milliseconds in the top 48 bits, entropy in the low 80.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RecordId(u128);

const ENTROPY_BITS: u32 = 80;
const ENTROPY_MASK: u128 = (1u128 << ENTROPY_BITS) - 1;

impl RecordId {
    /// Builds an id from a clock reading and entropy. Entropy above 80 bits is masked off.
    pub fn new(clock_ms: Millis, entropy: u128) -> Result<Self> {
        if clock_ms >= 1u64 << 48 {
            return Err(MemError::ClockOutOfRange(clock_ms));
        }
        Ok(RecordId(((clock_ms as u128) << ENTROPY_BITS) | (entropy & ENTROPY_MASK)))
    }

    pub fn from_u128(v: u128) -> Self {
        RecordId(v)
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }

    pub fn clock_ms(self) -> Millis {
        (self.0 >> ENTROPY_BITS) as Millis
    }

    pub fn entropy(self) -> u128 {
        self.0 & ENTROPY_MASK
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.len() != 32 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(MemError::NotFound(format!("malformed id `{s}`")));
        }
        u128::from_str_radix(s, 16)
            .map(RecordId)
            .map_err(|_| MemError::NotFound(format!("malformed id `{s}`")))
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordId({:032x})", self.0)
    }
}

impl Serialize for RecordId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for RecordId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RecordId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordState {
    Provisional,
    Active,
    Superseded,
    Retired,
}

impl RecordState {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordState::Provisional => "provisional",
            RecordState::Active => "active",
            RecordState::Superseded => "superseded",
            RecordState::Retired => "retired",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Stated,
    Inferred,
}

/// One typed, timestamped memory chunk. Content is immutable after the write;
/// only the lifecycle fields change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: RecordId,
    pub namespace: String,
    pub session_id: String,
    #[serde(rename = "type")]
    pub memory_type: MemoryType,
    pub content: String,
    pub tags: BTreeSet<String>,
    pub code: BinaryCode,
    pub created_at: Millis,
    pub superseded_at: Option<Millis>,
    pub state: RecordState,
    pub superseded_by: Option<RecordId>,
    pub conflict_flag: bool,
    #[serde(default)]
    pub provenance: Provenance,
}

impl MemoryRecord {
    /// Checks the supersession invariants.
    pub fn is_consistent(&self) -> bool {
        let superseded = self.state == RecordState::Superseded;
        let fields_set = self.superseded_at.is_some() && self.superseded_by.is_some();
        let fields_clear = self.superseded_at.is_none() && self.superseded_by.is_none();
        let ordered = self.superseded_at.is_none_or(|t| t >= self.created_at);
        ordered && if superseded { fields_set } else { fields_clear }
    }
}

/// Time-bounded grouping window. Sessions never restrict retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub namespace: String,
    pub start: Millis,
    pub end: Millis,
}

impl Session {
    pub fn covers(&self, t: Millis) -> bool {
        self.start <= t && t < self.end
    }
}

pub const MAX_NAMESPACE_LEN: usize = 128;

/// Namespaces double as directory names, so the alphabet is restricted.
pub fn validate_namespace(ns: &str) -> Result<()> {
    let ok = !ns.is_empty()
        && ns.len() <= MAX_NAMESPACE_LEN
        && !ns.starts_with('.')
        && ns
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(MemError::InvalidNamespace(ns.to_string()))
    }
}

/// Parses a UTC timestamp given as epoch milliseconds or RFC 3339.
pub fn parse_time(s: &str) -> Result<Millis> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<Millis>() {
        return Ok(ms);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .and_then(|d| Millis::try_from(d.timestamp_millis()).ok())
        .ok_or_else(|| MemError::InvalidParams(format!("`{s}` is neither epoch milliseconds nor RFC 3339")))
}
