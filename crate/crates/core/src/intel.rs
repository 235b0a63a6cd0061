//! Per-namespace daily Markdown artifacts: sessions, type counts, conflicts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

pub use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::conflict::ConflictRecord;
use crate::error::{MemError, Result};
use crate::llm::iso8601;
use crate::model::{MemoryType, Millis, Session, DAY_MS};
use crate::store::{MemoryStore, NamespaceState};

/// Dashboard route that conflict entries link to.
pub const CONFLICT_LINK_PREFIX: &str = "/ui/#/conflicts/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySummary {
    pub namespace: String,
    pub date: String,
    pub sessions: Vec<Session>,
    pub counts_by_type: BTreeMap<String, usize>,
    pub new_conflicts: Vec<ConflictRecord>,
    pub unresolved_conflicts: Vec<ConflictRecord>,
    pub rendered: String,
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| MemError::InvalidParams(format!("date `{s}` is not YYYY-MM-DD")))
}

/// UTC calendar day containing `ms`.
pub fn date_of(ms: Millis) -> NaiveDate {
    chrono::DateTime::from_timestamp_millis(ms as i64).map_or(NaiveDate::MIN, |d| d.date_naive())
}

/// UTC midnight bounds `[start, end)` of a calendar day.
pub fn day_bounds(date: NaiveDate) -> (Millis, Millis) {
    let start = date
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
        .timestamp_millis()
        .max(0) as Millis;
    (start, start + DAY_MS)
}

/// Builds the summary of `date` from a namespace state. Pure.
pub fn summarize(namespace: &str, state: Option<&NamespaceState>, date: NaiveDate) -> DailySummary {
    let (d0, d1) = day_bounds(date);
    let mut counts: BTreeMap<String, usize> =
        MemoryType::ALL.iter().map(|t| (t.name().to_string(), 0)).collect();
    let mut sessions = Vec::new();
    let mut new_conflicts = Vec::new();
    let mut unresolved = Vec::new();
    let mut writes_per_session: BTreeMap<String, usize> = BTreeMap::new();
    if let Some(state) = state {
        for r in state.records().iter().filter(|r| d0 <= r.created_at && r.created_at < d1) {
            *counts.get_mut(r.memory_type.name()).expect("all types present") += 1;
            *writes_per_session.entry(r.session_id.clone()).or_default() += 1;
        }
        sessions = state.sessions().iter().filter(|s| s.start < d1 && s.end > d0).cloned().collect();
        sessions.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.session_id.cmp(&b.session_id)));
        for c in state.conflicts() {
            if d0 <= c.opened_at && c.opened_at < d1 {
                new_conflicts.push(c.clone());
            }
            let open_at_day_end =
                c.opened_at < d1 && c.resolution.as_ref().is_none_or(|r| r.at >= d1);
            if open_at_day_end {
                unresolved.push(c.clone());
            }
        }
        new_conflicts.sort_by_key(|c| c.conflict_id);
        unresolved.sort_by_key(|c| c.conflict_id);
    }

    let date_str = date.format("%Y-%m-%d").to_string();
    let mut md = String::new();
    let _ = writeln!(md, "# Daily summary for {namespace} on {date_str}\n");
    let _ = writeln!(md, "## Sessions\n");
    if sessions.is_empty() {
        let _ = writeln!(md, "_No sessions._");
    }
    for s in &sessions {
        let n = writes_per_session.get(&s.session_id).copied().unwrap_or(0);
        let _ = writeln!(
            md,
            "- `{}` {} to {} ({} writes this day)",
            s.session_id,
            iso8601(s.start),
            iso8601(s.end),
            n
        );
    }
    let total: usize = counts.values().sum();
    let _ = writeln!(md, "\n## Memories by type\n");
    let _ = writeln!(md, "| type | count |\n|---|---|");
    for (t, n) in &counts {
        let _ = writeln!(md, "| {t} | {n} |");
    }
    let _ = writeln!(md, "\nTotal: {total}");
    let _ = writeln!(md, "\n## New conflicts\n");
    render_conflicts(&mut md, state, &new_conflicts, d1);
    let _ = writeln!(md, "\n## Unresolved conflicts\n");
    render_conflicts(&mut md, state, &unresolved, d1);

    DailySummary {
        namespace: namespace.to_string(),
        date: date_str,
        sessions,
        counts_by_type: counts,
        new_conflicts,
        unresolved_conflicts: unresolved,
        rendered: md,
    }
}

fn render_conflicts(md: &mut String, state: Option<&NamespaceState>, list: &[ConflictRecord], day_end: Millis) {
    if list.is_empty() {
        let _ = writeln!(md, "_None._");
        return;
    }
    let content = |id| {
        state
            .and_then(|s| s.record(id))
            .map(|r| format!("({}) {}", r.memory_type, r.content))
            .unwrap_or_default()
    };
    for c in list {
        let status = match &c.resolution {
            Some(r) if r.at < day_end => format!("resolved ({}) at {}", r.action, iso8601(r.at)),
            _ => "open".to_string(),
        };
        let _ = writeln!(md, "### Conflict `{}`\n", c.conflict_id);
        let _ = writeln!(md, "- opened: {}", iso8601(c.opened_at));
        let _ = writeln!(md, "- new memory `{}` {}", c.new_record, content(c.new_record));
        let _ = writeln!(md, "- candidates:");
        for cand in &c.candidates {
            let _ = writeln!(md, "  - `{}` score {:.4} {}", cand.id, cand.score, content(cand.id));
        }
        let _ = writeln!(md, "- status at day end: {status}");
        let _ = writeln!(md, "- review: {CONFLICT_LINK_PREFIX}{}\n", c.conflict_id);
    }
}

/// Summarizes `date` and, for persistent stores, writes
/// `{root}/{namespace}/daily/{date}.md`.
pub fn generate(store: &MemoryStore, namespace: &str, date: NaiveDate) -> Result<(DailySummary, Option<PathBuf>)> {
    crate::model::validate_namespace(namespace)?;
    if date > date_of(store.now()) {
        return Err(MemError::FutureDate(date.format("%Y-%m-%d").to_string()));
    }
    let summary = store
        .with_namespace(namespace, |s| summarize(namespace, Some(s), date))
        .unwrap_or_else(|| summarize(namespace, None, date));
    let path = match &store.config().root {
        Some(root) => {
            let dir = root.join(namespace).join("daily");
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.md", summary.date));
            std::fs::write(&path, &summary.rendered)?;
            Some(path)
        }
        None => None,
    };
    Ok((summary, path))
}
