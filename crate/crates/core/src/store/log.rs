//! Append-only JSON-lines event log with a SHA-256 hash chain.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical;
use crate::conflict::{ConflictRecord, Resolution};
use crate::error::{MemError, Result};
use crate::model::{MemoryRecord, Millis, RecordId, Session};

pub const LOG_FILE: &str = "events.log";
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RecordWritten,
    ConflictOpened,
    ConflictResolved,
    SessionOpened,
    RecordSuperseded,
}

/// Typed payloads, one per [`EventKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    RecordWritten { record: MemoryRecord },
    ConflictOpened { conflict: ConflictRecord },
    ConflictResolved(ResolvedPayload),
    SessionOpened { session: Session },
    RecordSuperseded { old_id: RecordId, new_id: RecordId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPayload {
    pub conflict_id: RecordId,
    pub resolution: Resolution,
    /// Candidates moved to `superseded` by this resolution.
    pub superseded: Vec<RecordId>,
    /// Records whose conflict flag is set by this resolution.
    pub flagged: Vec<RecordId>,
}

#[derive(Serialize, Deserialize)]
struct RecordPayload {
    record: MemoryRecord,
}

#[derive(Serialize, Deserialize)]
struct ConflictPayload {
    conflict: ConflictRecord,
}

#[derive(Serialize, Deserialize)]
struct SessionPayload {
    session: Session,
}

#[derive(Serialize, Deserialize)]
struct SupersededPayload {
    old_id: RecordId,
    new_id: RecordId,
}

fn decode<T: serde::de::DeserializeOwned>(seq: u64, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| MemError::CorruptLog { seq, reason: e.to_string() })
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::RecordWritten { .. } => EventKind::RecordWritten,
            EventBody::ConflictOpened { .. } => EventKind::ConflictOpened,
            EventBody::ConflictResolved(_) => EventKind::ConflictResolved,
            EventBody::SessionOpened { .. } => EventKind::SessionOpened,
            EventBody::RecordSuperseded { .. } => EventKind::RecordSuperseded,
        }
    }

    fn to_payload(&self) -> Result<Value> {
        match self {
            EventBody::RecordWritten { record } => {
                canonical::to_value(&RecordPayload { record: record.clone() })
            }
            EventBody::ConflictOpened { conflict } => {
                canonical::to_value(&ConflictPayload { conflict: conflict.clone() })
            }
            EventBody::ConflictResolved(p) => canonical::to_value(p),
            EventBody::SessionOpened { session } => {
                canonical::to_value(&SessionPayload { session: session.clone() })
            }
            EventBody::RecordSuperseded { old_id, new_id } => {
                canonical::to_value(&SupersededPayload { old_id: *old_id, new_id: *new_id })
            }
        }
    }
}

/// One persisted event. `hash` chains over the previous event's hash and this
/// event's canonical body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub at: Millis,
    pub kind: EventKind,
    pub payload: Value,
    pub hash: String,
}

#[derive(Serialize)]
struct Unsealed<'a> {
    seq: u64,
    at: Millis,
    kind: EventKind,
    payload: &'a Value,
}

fn chain_hash(prev: &str, seq: u64, at: Millis, kind: EventKind, payload: &Value) -> Result<String> {
    let body = canonical::to_string(&Unsealed { seq, at, kind, payload })?;
    let mut bytes = Vec::with_capacity(prev.len() + body.len());
    bytes.extend_from_slice(prev.as_bytes());
    bytes.extend_from_slice(body.as_bytes());
    Ok(canonical::sha256_hex(&bytes))
}

impl LogEvent {
    pub fn seal(seq: u64, at: Millis, body: &EventBody, prev_hash: &str) -> Result<Self> {
        let payload = body.to_payload()?;
        let kind = body.kind();
        let hash = chain_hash(prev_hash, seq, at, kind, &payload)?;
        Ok(LogEvent { seq, at, kind, payload, hash })
    }

    pub fn body(&self) -> Result<EventBody> {
        let seq = self.seq;
        Ok(match self.kind {
            EventKind::RecordWritten => {
                EventBody::RecordWritten { record: decode::<RecordPayload>(seq, &self.payload)?.record }
            }
            EventKind::ConflictOpened => EventBody::ConflictOpened {
                conflict: decode::<ConflictPayload>(seq, &self.payload)?.conflict,
            },
            EventKind::ConflictResolved => EventBody::ConflictResolved(decode(seq, &self.payload)?),
            EventKind::SessionOpened => EventBody::SessionOpened {
                session: decode::<SessionPayload>(seq, &self.payload)?.session,
            },
            EventKind::RecordSuperseded => {
                let p: SupersededPayload = decode(seq, &self.payload)?;
                EventBody::RecordSuperseded { old_id: p.old_id, new_id: p.new_id }
            }
        })
    }

    /// Checks this event's position and hash against its predecessor.
    pub fn verify(&self, expected_seq: u64, prev_hash: &str) -> Result<()> {
        if self.seq != expected_seq {
            return Err(MemError::CorruptLog {
                seq: self.seq,
                reason: format!("expected seq {expected_seq}"),
            });
        }
        let hash = chain_hash(prev_hash, self.seq, self.at, self.kind, &self.payload)?;
        if hash != self.hash {
            return Err(MemError::CorruptLog { seq: self.seq, reason: "hash mismatch".into() });
        }
        Ok(())
    }

    pub fn to_line(&self) -> Result<String> {
        let mut line = canonical::to_string(self)?;
        line.push('\n');
        Ok(line)
    }
}

/// What [`read_log`] had to discard from the end of the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailTruncation {
    /// Sequence number the discarded line would have carried.
    pub seq: u64,
    pub dropped_bytes: usize,
    /// Byte length of the intact prefix.
    pub valid_len: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LogContents {
    pub events: Vec<LogEvent>,
    pub truncation: Option<TailTruncation>,
}

/// Parses and verifies a log. A damaged final line is dropped and reported;
/// damage anywhere else is a [`MemError::CorruptLog`].
pub fn parse_log(bytes: &[u8]) -> Result<LogContents> {
    let mut events = Vec::new();
    let mut prev_hash = GENESIS_HASH.to_string();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let seq = events.len() as u64 + 1;
        let rest = &bytes[offset..];
        let (line, complete) = match rest.iter().position(|&b| b == b'\n') {
            Some(end) => (&rest[..end], true),
            None => (rest, false),
        };
        let is_last = !complete || offset + line.len() + 1 == bytes.len();
        // A torn write leaves an unterminated or unparseable final line; a
        // well-formed line with the wrong seq or hash is never torn.
        let parsed = if complete {
            std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<LogEvent>(s).map_err(|e| e.to_string()))
        } else {
            Err("final line has no terminating newline".to_string())
        };
        match parsed {
            Ok(ev) => {
                ev.verify(seq, &prev_hash)?;
                prev_hash = ev.hash.clone();
                events.push(ev);
                offset += line.len() + 1;
            }
            Err(reason) if is_last => {
                return Ok(LogContents {
                    events,
                    truncation: Some(TailTruncation {
                        seq,
                        dropped_bytes: bytes.len() - offset,
                        valid_len: offset as u64,
                        reason,
                    }),
                });
            }
            Err(reason) => return Err(MemError::CorruptLog { seq, reason }),
        }
    }
    Ok(LogContents { events, truncation: None })
}

pub fn read_log(path: &Path) -> Result<LogContents> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(e.into()),
    }
    parse_log(&bytes)
}

/// Writer half of a namespace log.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    len: u64,
    sync: bool,
}

impl EventLog {
    /// Opens for appending, cutting the file back to `valid_len` first.
    pub fn open(path: &Path, valid_len: u64, sync: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        Ok(EventLog { path: path.to_path_buf(), file, len: valid_len, sync })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends all events in a single write. On failure the file is cut back
    /// to its previous length.
    pub fn append(&mut self, events: &[LogEvent]) -> Result<()> {
        let mut buf = String::new();
        for ev in events {
            buf.push_str(&ev.to_line()?);
        }
        let written = self.file.write_all(buf.as_bytes()).and_then(|_| {
            if self.sync {
                self.file.sync_data()
            } else {
                Ok(())
            }
        });
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            return Err(MemError::StorageFailure(e.to_string()));
        }
        self.len += buf.len() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Session;

    fn session_event(seq: u64, prev: &str) -> LogEvent {
        let body = EventBody::SessionOpened {
            session: Session { session_id: format!("s{seq}"), namespace: "n".into(), start: seq, end: seq + 1 },
        };
        LogEvent::seal(seq, seq, &body, prev).unwrap()
    }

    fn chain(n: u64) -> Vec<LogEvent> {
        let mut prev = GENESIS_HASH.to_string();
        (1..=n)
            .map(|seq| {
                let ev = session_event(seq, &prev);
                prev = ev.hash.clone();
                ev
            })
            .collect()
    }

    fn bytes_of(events: &[LogEvent]) -> Vec<u8> {
        events.iter().map(|e| e.to_line().unwrap()).collect::<String>().into_bytes()
    }

    #[test]
    fn round_trip() {
        let events = chain(3);
        let parsed = parse_log(&bytes_of(&events)).unwrap();
        assert_eq!(parsed.events, events);
        assert!(parsed.truncation.is_none());
        assert_eq!(parsed.events[1].body().unwrap().kind(), EventKind::SessionOpened);
    }

    #[test]
    fn torn_tail_is_dropped_and_reported() {
        let events = chain(4);
        let mut bytes = bytes_of(&events);
        let full = bytes.len();
        bytes.truncate(full - 17);
        let parsed = parse_log(&bytes).unwrap();
        assert_eq!(parsed.events, events[..3].to_vec());
        let t = parsed.truncation.unwrap();
        assert_eq!(t.seq, 4);
        assert_eq!(t.valid_len as usize, bytes_of(&events[..3]).len());
    }

    #[test]
    fn damage_in_the_middle_is_fatal() {
        let events = chain(3);
        let mut lines: Vec<String> = events.iter().map(|e| e.to_line().unwrap()).collect();
        lines[1] = lines[1].replace("\"s2\"", "\"sX\"");
        let err = parse_log(lines.concat().as_bytes()).unwrap_err();
        assert_eq!(err, MemError::CorruptLog { seq: 2, reason: "hash mismatch".into() });
    }

    #[test]
    fn sequence_gap_is_fatal() {
        let mut events = chain(3);
        events.remove(1);
        let err = parse_log(&bytes_of(&events)).unwrap_err();
        assert!(matches!(err, MemError::CorruptLog { seq: 3, .. }), "{err:?}");
    }

    #[test]
    fn garbage_final_line_is_recovered() {
        let events = chain(2);
        let mut bytes = bytes_of(&events);
        bytes.extend_from_slice(b"{\"seq\":3,\"kin\n");
        let parsed = parse_log(&bytes).unwrap();
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.truncation.unwrap().seq, 3);
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ns").join(LOG_FILE);
        let events = chain(2);
        let mut log = EventLog::open(&path, 0, false).unwrap();
        log.append(&events).unwrap();
        assert_eq!(read_log(&path).unwrap().events, events);
        assert!(read_log(&dir.path().join("missing")).unwrap().events.is_empty());
    }

    #[test]
    fn awkward_floats_survive_a_round_trip() {
        let payload = serde_json::json!({ "scores": [0.9857210779749763, 0.1 + 0.2, 1e-300, 0.98046875] });
        let ev = LogEvent {
            seq: 1,
            at: 5,
            kind: EventKind::SessionOpened,
            hash: chain_hash(GENESIS_HASH, 1, 5, EventKind::SessionOpened, &payload).unwrap(),
            payload,
        };
        let parsed = parse_log(ev.to_line().unwrap().as_bytes()).unwrap();
        assert_eq!(parsed.events, vec![ev]);
    }
}
