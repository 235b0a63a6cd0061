//! Staged retrieval ablation over a seeded synthetic corpus.
//!
//! Each stage ingests the whole corpus into a fresh namespace, asks every
//! needle question once and reports needle recall plus p99 latencies.
//! Prompt tuning and model swaps only change the answering model, so those
//! stages are listed in the report as no-ops and never run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MemError, Result};
use crate::its::RetrievalParams;
use crate::model::{Millis, RecordId};
use crate::rng::{ManualClock, SplitMix64};
use crate::store::{MemoryStore, RememberRequest, StoreConfig};

const TEMPLATES: &str = include_str!("../fixtures/templates.txt");
const ATTRIBUTES: &str = include_str!("../fixtures/attributes.txt");
const SYLLABLES: &str = include_str!("../fixtures/syllables.txt");

/// Ingest timestamps start here and advance 1 ms per sentence.
pub const CORPUS_EPOCH: Millis = 1_700_000_000_000;
const NAMESPACE: &str = "bench";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_name: String,
    /// `None` is uncapped: every hit above the threshold is returned.
    pub max_k: Option<usize>,
    pub threshold: f64,
}

impl StageConfig {
    pub fn new(name: &str, max_k: Option<usize>, threshold: f64) -> Self {
        StageConfig { stage_name: name.into(), max_k, threshold }
    }

    /// The three retrieval stages, in order.
    pub fn shipped() -> Vec<StageConfig> {
        vec![
            StageConfig::new("stage1", Some(10), 0.15),
            StageConfig::new("stage2", Some(40), 0.10),
            StageConfig::new("stage4", Some(100), 0.05),
        ]
    }

    /// Extra, non-default configuration with no cap on hits.
    pub fn uncapped() -> StageConfig {
        StageConfig::new("uncapped", None, 0.05)
    }

    pub fn params(&self) -> RetrievalParams {
        RetrievalParams::with_limits(self.max_k.unwrap_or(usize::MAX), self.threshold)
    }

    pub fn k_label(&self) -> String {
        self.max_k.map_or_else(|| "inf".to_string(), |k| k.to_string())
    }
}

/// Stages that only vary the answering model; kept in reports for completeness.
pub const NO_OP_STAGES: [(&str, &str); 2] = [
    ("stage3", "prompt optimization: model-side only, retrieval unchanged"),
    ("stage5", "model upgrade: model-side only, retrieval unchanged"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    /// Position of the fact in `SyntheticCorpus::sentences`.
    pub sentence: usize,
    pub question: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub seed: u64,
    /// Every sentence in ingest order, needles included.
    pub sentences: Vec<String>,
    pub needles: Vec<Needle>,
}

impl SyntheticCorpus {
    pub fn n_distractors(&self) -> usize {
        self.sentences.len() - self.needles.len()
    }
}

struct Template<'a> {
    fact: &'a str,
    question: &'a str,
}

fn lines(src: &str) -> impl Iterator<Item = &str> {
    src.lines().map(str::trim_end).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn templates() -> Vec<Template<'static>> {
    lines(TEMPLATES)
        .map(|l| {
            let (fact, question) = l.split_once('\t').expect("template line has a tab");
            Template { fact, question }
        })
        .collect()
}

fn fill(template: &str, attr: &str, entity: &str, value: &str) -> String {
    template.replace("{attr}", attr).replace("{entity}", entity).replace("{value}", value)
}

fn word(rng: &mut SplitMix64, syllables: &[&str], n: usize) -> String {
    (0..n).map(|_| *rng.pick(syllables)).collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Deterministic corpus for `seed`. Entities come from a small shared pool
/// so distractors compete with needles; needle values carry a numeric
/// suffix that distractor values never have, which makes them unique.
pub fn generate_corpus(seed: u64, n_distractors: usize, n_needles: usize) -> Result<SyntheticCorpus> {
    if n_needles == 0 {
        return Err(MemError::InvalidParams("corpus needs at least one needle".into()));
    }
    if n_distractors < n_needles {
        return Err(MemError::InvalidParams(format!(
            "{n_distractors} distractors is fewer than {n_needles} needles"
        )));
    }
    let templates = templates();
    let attrs: Vec<&str> = lines(ATTRIBUTES).collect();
    let syllables: Vec<&str> = lines(SYLLABLES).collect();
    let mut rng = SplitMix64::new(seed);

    let mut entities: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| capitalize(&format!("{a}{b}"))))
        .collect();
    rng.shuffle(&mut entities);
    let pool = &entities[..entities.len().min(400)];

    let mut sentences = Vec::with_capacity(n_distractors + n_needles);
    let mut asked = BTreeSet::new();
    let mut needle_facts = Vec::with_capacity(n_needles);
    while needle_facts.len() < n_needles {
        let attr = *rng.pick(&attrs);
        let entity = rng.pick(pool).clone();
        if !asked.insert((attr, entity.clone())) {
            if asked.len() >= attrs.len() * pool.len() {
                return Err(MemError::InvalidParams(format!("{n_needles} needles exceed the question space")));
            }
            continue;
        }
        let t = rng.pick(&templates);
        let value = format!("{}{}", word(&mut rng, &syllables, 2), needle_facts.len());
        needle_facts.push((fill(t.fact, attr, &entity, &value), fill(t.question, attr, &entity, &value), value));
    }
    for _ in 0..n_distractors {
        let attr = *rng.pick(&attrs);
        let entity = rng.pick(pool);
        let t = rng.pick(&templates);
        let value = word(&mut rng, &syllables, 3);
        sentences.push(fill(t.fact, attr, entity, &value));
    }

    // Spread needles over the stream: needle j goes at a random slot.
    let mut slots: Vec<usize> = (0..n_distractors + n_needles).collect();
    rng.shuffle(&mut slots);
    let mut needle_slots: Vec<usize> = slots[..n_needles].to_vec();
    needle_slots.sort_unstable();
    let mut needles = Vec::with_capacity(n_needles);
    for ((fact, question, value), slot) in needle_facts.into_iter().zip(needle_slots) {
        sentences.insert(slot, fact);
        needles.push(Needle { sentence: slot, question, value });
    }
    Ok(SyntheticCorpus { seed, sentences, needles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: StageConfig,
    pub needle_recall: f64,
    pub mean_retrieved: f64,
    pub ingest_p99_ms: f64,
    pub retrieve_p99_ms: f64,
}

/// Nearest-rank percentile of `samples` (sorted in place).
pub fn percentile(samples: &mut [f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * samples.len() as f64).ceil() as usize;
    samples[rank.clamp(1, samples.len()) - 1]
}

/// Store used for a stage run: in memory, seeded ids, detection off.
pub fn bench_store(seed: u64) -> MemoryStore {
    let cfg = StoreConfig { contradiction_threshold: None, ..StoreConfig::in_memory() };
    MemoryStore::builder(cfg)
        .clock(Arc::new(ManualClock::new(CORPUS_EPOCH)))
        .entropy(Box::new(SplitMix64::new(seed)))
        .open()
        .expect("in-memory store opens")
}

/// Ingests `corpus` into `store` and returns the record id of each sentence.
pub fn ingest(store: &MemoryStore, corpus: &SyntheticCorpus, timings: &mut Vec<f64>) -> Result<Vec<RecordId>> {
    let mut ids = Vec::with_capacity(corpus.sentences.len());
    for (i, s) in corpus.sentences.iter().enumerate() {
        let req = RememberRequest::new(NAMESPACE, s).at(CORPUS_EPOCH + i as Millis);
        let t = Instant::now();
        let out = store.remember(req)?;
        timings.push(t.elapsed().as_secs_f64() * 1e3);
        ids.push(out.record().id);
    }
    Ok(ids)
}

pub fn run_stage(corpus: &SyntheticCorpus, config: &StageConfig) -> Result<StageMetrics> {
    run_ablation(corpus, std::slice::from_ref(config)).map(|mut m| m.remove(0))
}

/// Ingests once and runs every stage against the same store. Stages share
/// the ingest figure; the store is identical to a fresh one per stage since
/// detection is off and ids are seeded.
pub fn run_ablation(corpus: &SyntheticCorpus, stages: &[StageConfig]) -> Result<Vec<StageMetrics>> {
    let store = bench_store(corpus.seed);
    let mut ingest_ms = Vec::with_capacity(corpus.sentences.len());
    let ids = ingest(&store, corpus, &mut ingest_ms)?;
    let ingest_p99_ms = percentile(&mut ingest_ms, 99.0);
    stages.iter().map(|c| measure(&store, &ids, corpus, c, ingest_p99_ms)).collect()
}

fn measure(
    store: &MemoryStore,
    ids: &[RecordId],
    corpus: &SyntheticCorpus,
    config: &StageConfig,
    ingest_p99_ms: f64,
) -> Result<StageMetrics> {
    let params = config.params();
    let mut retrieve_ms = Vec::with_capacity(corpus.needles.len());
    let (mut found, mut retrieved) = (0usize, 0usize);
    for needle in &corpus.needles {
        let t = Instant::now();
        let hits = store.recall(NAMESPACE, &needle.question, &params)?;
        retrieve_ms.push(t.elapsed().as_secs_f64() * 1e3);
        retrieved += hits.len();
        let want = ids[needle.sentence];
        found += usize::from(hits.iter().any(|h| h.record.id == want));
    }
    let n = corpus.needles.len() as f64;
    Ok(StageMetrics {
        stage: config.clone(),
        needle_recall: found as f64 / n,
        mean_retrieved: retrieved as f64 / n,
        ingest_p99_ms,
        retrieve_p99_ms: percentile(&mut retrieve_ms, 99.0),
    })
}

/// One report line; this is also the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: String,
    pub k: String,
    pub tau: f64,
    pub needle_recall: f64,
    pub delta_recall: Option<f64>,
    pub mean_retrieved: f64,
    pub ingest_p99_ms: f64,
    pub retrieve_p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub csv: String,
    pub markdown: String,
}

pub fn report_rows(metrics: &[StageMetrics]) -> Vec<ReportRow> {
    let mut prev: Option<f64> = None;
    metrics
        .iter()
        .map(|m| {
            let row = ReportRow {
                stage: m.stage.stage_name.clone(),
                k: m.stage.k_label(),
                tau: m.stage.threshold,
                needle_recall: m.needle_recall,
                delta_recall: prev.map(|p| m.needle_recall - p),
                mean_retrieved: m.mean_retrieved,
                ingest_p99_ms: m.ingest_p99_ms,
                retrieve_p99_ms: m.retrieve_p99_ms,
            };
            prev = Some(m.needle_recall);
            row
        })
        .collect()
}

pub fn report(metrics: &[StageMetrics]) -> Result<Report> {
    if metrics.is_empty() {
        return Err(MemError::InvalidParams("report needs at least one stage".into()));
    }
    let rows = report_rows(metrics);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| MemError::StorageFailure(e.to_string()))?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| MemError::StorageFailure(e.to_string()))?)
        .expect("csv output is utf-8");

    let mut md = String::from(
        "| stage | k | τ | needle_recall | Δrecall | ingest_p99_ms | retrieve_p99_ms |\n|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let delta = r.delta_recall.map(|d| format!("{d:+.4}")).unwrap_or_default();
        md.push_str(&format!(
            "| {} | {} | {:.2} | {:.4} | {} | {:.3} | {:.3} |\n",
            r.stage, r.k, r.tau, r.needle_recall, delta, r.ingest_p99_ms, r.retrieve_p99_ms
        ));
    }
    md.push('\n');
    for (name, why) in NO_OP_STAGES {
        md.push_str(&format!("- {name} not run ({why})\n"));
    }
    Ok(Report { rows, csv, markdown: md })
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| MemError::InvalidParams(e.to_string()))
}

/// Writes `ablation.csv` and `ablation.md` into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("ablation.csv");
    let md = dir.join("ablation.md");
    std::fs::write(&csv, &report.csv)?;
    std::fs::write(&md, &report.markdown)?;
    Ok((csv, md))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_stages() {
        let s = StageConfig::shipped();
        let pairs: Vec<_> = s.iter().map(|c| (c.max_k, c.threshold)).collect();
        assert_eq!(pairs, vec![(Some(10), 0.15), (Some(40), 0.10), (Some(100), 0.05)]);
        assert_eq!(StageConfig::uncapped().params().max_k, usize::MAX);
    }

    #[test]
    fn corpus_is_seeded() {
        let a = generate_corpus(1, 10, 2).unwrap();
        assert_eq!(a, generate_corpus(1, 10, 2).unwrap());
        assert_ne!(a.sentences, generate_corpus(2, 10, 2).unwrap().sentences);
        assert_eq!(a.sentences.len(), 12);
        assert_eq!(a.n_distractors(), 10);
    }

    #[test]
    fn needle_values_distinct_and_placed() {
        let c = generate_corpus(9, 500, 200).unwrap();
        let values: BTreeSet<_> = c.needles.iter().map(|n| n.value.as_str()).collect();
        assert_eq!(values.len(), 200);
        let has = |s: &str, v: &str| crate::embedder::tokenize(s).iter().any(|t| t == v);
        for n in &c.needles {
            assert!(has(&c.sentences[n.sentence], &n.value));
            let holders = c.sentences.iter().filter(|s| has(s, &n.value)).count();
            assert_eq!(holders, 1, "value {} appears elsewhere", n.value);
        }
    }

    #[test]
    fn preconditions() {
        assert!(generate_corpus(1, 10, 0).is_err());
        assert!(generate_corpus(1, 1, 2).is_err());
    }

    #[test]
    fn open_gate_finds_every_needle() {
        let c = generate_corpus(4, 60, 6).unwrap();
        let m = run_stage(&c, &StageConfig::new("all", Some(1000), 0.0)).unwrap();
        assert_eq!(m.needle_recall, 1.0);
        let m = run_stage(&c, &StageConfig::shipped()[0]).unwrap();
        assert!(m.mean_retrieved <= 10.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&mut v, 99.0), 99.0);
        assert_eq!(percentile(&mut [5.0], 99.0), 5.0);
        assert_eq!(percentile(&mut [], 99.0), 0.0);
    }

    fn metric(name: &str, k: Option<usize>, tau: f64, recall: f64) -> StageMetrics {
        StageMetrics {
            stage: StageConfig::new(name, k, tau),
            needle_recall: recall,
            mean_retrieved: 3.5,
            ingest_p99_ms: 0.25,
            retrieve_p99_ms: 1.5,
        }
    }

    #[test]
    fn report_deltas_and_round_trip() {
        let one = report(&[metric("stage1", Some(10), 0.15, 0.5)]).unwrap();
        assert_eq!(one.rows[0].delta_recall, None);

        let ms = [
            metric("stage1", Some(10), 0.15, 0.5),
            metric("stage2", Some(40), 0.10, 0.75),
            metric("stage4", None, 0.05, 0.875),
        ];
        let r = report(&ms).unwrap();
        assert_eq!(r.rows[1].delta_recall, Some(0.25));
        assert_eq!(r.rows[2].delta_recall, Some(0.125));
        assert_eq!(r.rows[2].k, "inf");
        assert_eq!(parse_csv(&r.csv).unwrap(), r.rows);
        assert!(r.markdown.starts_with("| stage | k | τ | needle_recall | Δrecall |"));
        assert!(r.markdown.contains("| stage2 | 40 | 0.10 | 0.7500 | +0.2500 |"));
        assert!(r.markdown.contains("stage3 not run"));
        assert!(report(&[]).is_err());
    }
}
