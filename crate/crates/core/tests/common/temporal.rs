//! Log-replay oracle for point-in-time and change-window queries, shared by
//! the temporal tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use memgrain_core::conflict::ConflictFilter;
use memgrain_core::rng::{ManualClock, SplitMix64};
use memgrain_core::{MemoryRecord, MemoryStore, MemoryType, Millis, RecordId, RememberRequest, ResolutionAction, StoreConfig};
use serde_json::Value;

const START: Millis = 1_700_000_000_000;

#[derive(Clone, Copy, PartialEq, Debug)]
enum Ch {
    Activated,
    Superseded(RecordId),
    Retired,
    Flagged,
}

struct ORec {
    created: Millis,
    initial: String,
    changes: Vec<(Millis, Ch)>,
}

/// What the oracle can say about one record at a time point.
#[derive(Debug, PartialEq)]
struct View {
    id: RecordId,
    state: String,
    superseded_by: Option<RecordId>,
    superseded_at: Option<Millis>,
    flagged: bool,
}

impl ORec {
    fn fold(&self, id: RecordId, t: Millis) -> View {
        let mut v = View { id, state: self.initial.clone(), superseded_by: None, superseded_at: None, flagged: false };
        for &(at, ch) in self.changes.iter().filter(|(at, _)| *at <= t) {
            match ch {
                Ch::Activated => v.state = "active".into(),
                Ch::Superseded(by) => {
                    v.state = "superseded".into();
                    v.superseded_by = Some(by);
                    v.superseded_at = Some(at);
                }
                Ch::Retired => v.state = "retired".into(),
                Ch::Flagged => v.flagged = true,
            }
        }
        v
    }
}

#[derive(Default)]
struct Oracle {
    recs: BTreeMap<RecordId, ORec>,
    written: BTreeMap<RecordId, Value>,
    conflict_new: BTreeMap<String, RecordId>,
}

fn id(v: &Value) -> RecordId {
    RecordId::parse(v.as_str().unwrap()).unwrap()
}

impl Oracle {
    fn from_log(path: &std::path::Path) -> Oracle {
        let mut o = Oracle::default();
        for line in std::fs::read_to_string(path).unwrap().lines() {
            let ev: Value = serde_json::from_str(line).unwrap();
            let p = &ev["payload"];
            match ev["kind"].as_str().unwrap() {
                "record_written" => {
                    let r = &p["record"];
                    o.recs.insert(
                        id(&r["id"]),
                        ORec {
                            created: r["created_at"].as_u64().unwrap(),
                            initial: r["state"].as_str().unwrap().into(),
                            changes: Vec::new(),
                        },
                    );
                    o.written.insert(id(&r["id"]), r.clone());
                }
                "conflict_opened" => {
                    let c = &p["conflict"];
                    o.conflict_new.insert(c["conflict_id"].as_str().unwrap().into(), id(&c["new_record"]));
                }
                "record_superseded" => {
                    let at = ev["at"].as_u64().unwrap();
                    let (old, new) = (id(&p["old_id"]), id(&p["new_id"]));
                    o.push(old, at, Ch::Superseded(new));
                    o.activate(new, at);
                }
                "conflict_resolved" => {
                    let res = &p["resolution"];
                    let at = res["at"].as_u64().unwrap();
                    let new = o.conflict_new[p["conflict_id"].as_str().unwrap()];
                    for old in p["superseded"].as_array().unwrap() {
                        o.push(id(old), at, Ch::Superseded(new));
                    }
                    match res["action"].as_str().unwrap() {
                        "retain" => o.push(new, at, Ch::Retired),
                        _ => o.activate(new, at),
                    }
                    for f in p["flagged"].as_array().unwrap() {
                        let f = id(f);
                        if !o.recs[&f].fold(f, Millis::MAX).flagged {
                            o.push(f, at, Ch::Flagged);
                        }
                    }
                }
                _ => {}
            }
        }
        o
    }

    fn push(&mut self, id: RecordId, at: Millis, ch: Ch) {
        self.recs.get_mut(&id).unwrap().changes.push((at, ch));
    }

    fn activate(&mut self, id: RecordId, at: Millis) {
        if self.recs[&id].fold(id, Millis::MAX).state == "provisional" {
            self.push(id, at, Ch::Activated);
        }
    }

    fn as_of(&self, t: Millis) -> Vec<View> {
        self.recs
            .iter()
            .filter(|(_, r)| r.created <= t)
            .map(|(&id, r)| r.fold(id, t))
            .filter(|v| v.state == "active" || v.state == "provisional")
            .collect()
    }

    fn changed_since(&self, t0: Millis, t1: Option<Millis>) -> Vec<RecordId> {
        let inside = |t: Millis| t >= t0 && t1.is_none_or(|e| t < e);
        let mut out: Vec<(Millis, RecordId)> = self
            .recs
            .iter()
            .filter_map(|(&id, r)| {
                let times = std::iter::once(r.created).chain(r.changes.iter().map(|c| c.0));
                times.filter(|&t| inside(t)).max().map(|t| (t, id))
            })
            .collect();
        out.sort();
        out.into_iter().map(|(_, id)| id).collect()
    }
}

fn view(r: &MemoryRecord) -> View {
    View {
        id: r.id,
        state: r.state.as_str().into(),
        superseded_by: r.superseded_by,
        superseded_at: r.superseded_at,
        flagged: r.conflict_flag,
    }
}

const TYPES: [MemoryType; 3] = [MemoryType::Fact, MemoryType::Preference, MemoryType::Goal];
const ATTRS: [&str; 3] = ["deadline", "owner", "color"];
const ENTITIES: [&str; 3] = ["Apollo", "Borealis", "Cygnus"];
const VALUES: [&str; 6] = ["April", "May", "teal", "crimson", "Alice", "Bob"];

/// Runs one script and returns the event times it produced.
fn run_script(store: &MemoryStore, clock: &ManualClock, rng: &mut SplitMix64) -> Vec<Millis> {
    let mut times = Vec::new();
    let mut ids: Vec<RecordId> = Vec::new();
    for _ in 0..(10 + rng.below(30)) {
        let now = clock.advance(1 + rng.below(4000));
        times.push(now);
        match rng.below(10) {
            0..=5 => {
                let text = format!(
                    "The {} of {} is {}",
                    rng.pick(&ATTRS),
                    rng.pick(&ENTITIES),
                    rng.pick(&VALUES)
                );
                let back = if rng.below(4) == 0 { rng.below(20_000).min(now - START) } else { 0 };
                let req = RememberRequest::new("t", &text).typed(*rng.pick(&TYPES)).at(now - back);
                times.push(now - back);
                let out = store.remember(req).unwrap();
                ids.extend(out.records.iter().map(|r| r.id));
            }
            6 | 7 => {
                let open = store.list_conflicts("t", ConflictFilter::Open);
                if open.is_empty() {
                    continue;
                }
                let c = rng.pick(&open);
                let action = *rng.pick(&[ResolutionAction::Supersede, ResolutionAction::Retain, ResolutionAction::Annotate]);
                let target = (rng.below(3) == 0).then(|| rng.pick(&c.candidates).id);
                let _ = store.resolve(c.conflict_id, action, "tester", target, None);
            }
            _ => {
                if ids.len() < 2 {
                    continue;
                }
                let (a, b) = (*rng.pick(&ids), *rng.pick(&ids));
                // Illegal pairs are rejected and leave no trace.
                let _ = store.apply_supersession(a, b, None);
            }
        }
    }
    times
}

fn check(store: &MemoryStore, oracle: &Oracle, times: &[Millis], rng: &mut SplitMix64, seed: u64) {
    let mut probes: BTreeSet<Millis> = BTreeSet::new();
    for &t in times {
        probes.extend([t - 1, t, t + 1]);
    }
    let hi = *probes.last().unwrap();
    for _ in 0..20 {
        probes.insert(START - 10 + rng.below(hi - START + 20));
    }
    for &t in &probes {
        let got: Vec<View> = store.as_of("t", t).iter().map(view).collect();
        assert_eq!(got, oracle.as_of(t), "seed {seed}: as_of({t})");
    }
    let list: Vec<Millis> = probes.iter().copied().collect();
    for _ in 0..40 {
        let t0 = *rng.pick(&list);
        let t1 = if rng.below(3) == 0 { None } else { Some(t0 + rng.below(30_000)) };
        let got: Vec<RecordId> = store.changed_since("t", t0, t1).unwrap().iter().map(|r| r.id).collect();
        assert_eq!(got, oracle.changed_since(t0, t1), "seed {seed}: changed_since({t0}, {t1:?})");
    }
}

/// Runs `scripts` seeded scripts, panicking on the first mismatch, and
/// returns how many supersessions they produced.
pub fn run_scripts(scripts: u64) -> usize {
    let mut superseded_seen = 0usize;
    for seed in 0..scripts {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(START));
        let store = MemoryStore::builder(StoreConfig::persistent(dir.path()))
            .clock(clock.clone())
            .entropy(Box::new(SplitMix64::new(seed)))
            .open()
            .unwrap();
        let mut rng = SplitMix64::new(seed ^ 0x5eed);
        let times = run_script(&store, &clock, &mut rng);
        let oracle = Oracle::from_log(&dir.path().join("t").join("events.log"));
        check(&store, &oracle, &times, &mut rng, seed);

        // Superseded versions stay intact and rebuild as they were written.
        for (rid, written) in &oracle.written {
            let now = store.get(*rid).unwrap();
            let orig: MemoryRecord = serde_json::from_value(written.clone()).unwrap();
            assert_eq!((&now.content, &now.code, now.created_at), (&orig.content, &orig.code, orig.created_at));
            let then = store.with_namespace("t", |s| s.version_at(*rid, orig.created_at)).flatten().unwrap();
            assert_eq!(then, orig, "seed {seed}: version of {rid} at creation");
            superseded_seen += usize::from(now.state == memgrain_core::RecordState::Superseded);
        }

        // A reopened store answers the same way.
        drop(store);
        let reopened = MemoryStore::builder(StoreConfig::persistent(dir.path())).clock(clock.clone()).open().unwrap();
        check(&reopened, &oracle, &times, &mut SplitMix64::new(seed), seed);
    }
    superseded_seen
}

