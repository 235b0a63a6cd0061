//! Retrieval core: sign binarization, per-namespace bit statistics,
//! entropy-weighted bit-match scoring and exhaustive threshold-gated search.
//!
//! Scores are `sum of weights over agreeing bits / sum of all weights`. Weights
//! are carried as 32-bit fixed point so every partial sum is an exact integer;
//! the result is therefore independent of summation order, lookup-table
//! grouping and worker count.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedder::Embedding;
use crate::error::{MemError, Result};
use crate::model::{MemoryRecord, MemoryType, Millis, RecordState};

pub const DEFAULT_MAX_K: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// D-bit code, bit `i` stored in byte `i / 8` at position `i % 8` (LSB first).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    bytes: Vec<u8>,
}

impl BinaryCode {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        BinaryCode { bytes }
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if !bits.len().is_multiple_of(8) {
            return Err(MemError::DimensionMismatch {
                expected: bits.len().next_multiple_of(8),
                actual: bits.len(),
            });
        }
        let mut bytes = vec![0u8; bits.len() / 8];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Ok(BinaryCode { bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn dimension(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.bytes.iter().map(|b| b.count_ones()).sum()
    }

    pub fn hamming(&self, other: &BinaryCode) -> Result<u32> {
        check_dims(self.dimension(), other.dimension())?;
        Ok(self.bytes.iter().zip(&other.bytes).map(|(a, b)| (a ^ b).count_ones()).sum())
    }

    pub fn complement(&self) -> BinaryCode {
        BinaryCode { bytes: self.bytes.iter().map(|b| !b).collect() }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }
}

impl fmt::Debug for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryCode({})", self.to_hex())
    }
}

impl Serialize for BinaryCode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BinaryCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map(BinaryCode::from_bytes).map_err(serde::de::Error::custom)
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(MemError::DimensionMismatch { expected, actual })
    }
}

/// Bit `i` is set iff component `i` is strictly positive.
pub fn binarize(e: &Embedding, dimension: usize) -> Result<BinaryCode> {
    check_dims(dimension, e.dimension())?;
    let mut bytes = vec![0u8; dimension / 8];
    for (i, &v) in e.values().iter().enumerate() {
        if v > 0.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    Ok(BinaryCode { bytes })
}

/// Per-bit occurrence counts over every record ever written to a namespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStats {
    pub counts: Vec<u64>,
    pub n: u64,
}

impl BitStats {
    pub fn new(dimension: usize) -> Self {
        BitStats { counts: vec![0; dimension], n: 0 }
    }

    pub fn dimension(&self) -> usize {
        self.counts.len()
    }

    pub fn update(&mut self, code: &BinaryCode) -> Result<()> {
        check_dims(self.dimension(), code.dimension())?;
        for (j, &byte) in code.bytes().iter().enumerate() {
            let mut b = byte;
            while b != 0 {
                let k = b.trailing_zeros() as usize;
                self.counts[j * 8 + k] += 1;
                b &= b - 1;
            }
        }
        self.n += 1;
        Ok(())
    }
}

/// Functional form of [`BitStats::update`].
pub fn update_stats(mut stats: BitStats, code: &BinaryCode) -> Result<BitStats> {
    stats.update(code)?;
    Ok(stats)
}

/// Binary entropy of the Laplace-smoothed bit probability, one weight per bit.
/// Every weight lies in (0, 1].
pub fn bit_weights(stats: &BitStats) -> Vec<f64> {
    let denom = stats.n as f64 + 2.0;
    stats
        .counts
        .iter()
        .map(|&c| {
            let p = (c as f64 + 1.0) / denom;
            binary_entropy(p)
        })
        .collect()
}

fn binary_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    -(p * p.log2()) - q * q.log2()
}

const FIXED_ONE: f64 = 4_294_967_296.0; // 2^32

fn to_fixed(w: f64) -> u64 {
    ((w * FIXED_ONE).round() as u64).max(1)
}

/// Reference scorer: one bit at a time.
pub fn its_score(q: &BinaryCode, d: &BinaryCode, weights: &[f64]) -> Result<f64> {
    check_dims(q.dimension(), d.dimension())?;
    check_dims(q.dimension(), weights.len())?;
    let mut matched = 0u64;
    let mut total = 0u64;
    for (i, &w) in weights.iter().enumerate() {
        let wf = to_fixed(w);
        total += wf;
        if q.bit(i) == d.bit(i) {
            matched += wf;
        }
    }
    Ok(matched as f64 / total as f64)
}

/// Byte-wise lookup tables of mismatch weight, for scanning many codes against
/// one set of weights. Produces exactly the values of [`its_score`].
#[derive(Debug, Clone)]
pub struct WeightTable {
    mismatch: Vec<[u64; 256]>,
    total: u64,
}

impl WeightTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if !weights.len().is_multiple_of(8) {
            return Err(MemError::DimensionMismatch {
                expected: weights.len().next_multiple_of(8),
                actual: weights.len(),
            });
        }
        let fixed: Vec<u64> = weights.iter().map(|&w| to_fixed(w)).collect();
        let mut mismatch = Vec::with_capacity(fixed.len() / 8);
        for chunk in fixed.chunks(8) {
            let mut table = [0u64; 256];
            for x in 1..256usize {
                table[x] = table[x & (x - 1)] + chunk[x.trailing_zeros() as usize];
            }
            mismatch.push(table);
        }
        let total = fixed.iter().sum();
        Ok(WeightTable { mismatch, total })
    }

    pub fn from_stats(stats: &BitStats) -> Result<Self> {
        WeightTable::new(&bit_weights(stats))
    }

    pub fn dimension(&self) -> usize {
        self.mismatch.len() * 8
    }

    #[inline]
    pub fn score_bytes(&self, q: &[u8], d: &[u8]) -> f64 {
        let mut miss = 0u64;
        for ((table, &a), &b) in self.mismatch.iter().zip(q).zip(d) {
            miss += table[(a ^ b) as usize];
        }
        self.score_from_miss(miss)
    }

    #[inline]
    pub fn score_from_miss(&self, miss: u64) -> f64 {
        (self.total - miss) as f64 / self.total as f64
    }

    /// Weighted mismatch of two codes, or `None` as soon as it exceeds `limit`.
    #[inline]
    pub fn miss_within(&self, q: &[u8], d: &[u8], limit: u64) -> Option<u64> {
        let mut miss = 0u64;
        for (k, ((table, &a), &b)) in self.mismatch.iter().zip(q).zip(d).enumerate() {
            miss += table[(a ^ b) as usize];
            if k % 8 == 7 && miss > limit {
                return None;
            }
        }
        (miss <= limit).then_some(miss)
    }

    /// A mismatch bound no smaller than any mismatch scoring at least
    /// `threshold`. Callers still compare the exact score.
    pub fn miss_limit(&self, threshold: f64) -> u64 {
        if threshold <= 0.0 {
            return u64::MAX;
        }
        let slack = ((1.0 - threshold).max(0.0) * self.total as f64).ceil() as u64;
        slack.saturating_add(2)
    }

    pub fn score(&self, q: &BinaryCode, d: &BinaryCode) -> Result<f64> {
        check_dims(self.dimension(), q.dimension())?;
        check_dims(self.dimension(), d.dimension())?;
        Ok(self.score_bytes(q.bytes(), d.bytes()))
    }
}

fn default_max_k() -> usize {
    DEFAULT_MAX_K
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Query-side retrieval knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub types: Option<BTreeSet<MemoryType>>,
    #[serde(default)]
    pub as_of: Option<Millis>,
    #[serde(default)]
    pub include_superseded: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            max_k: DEFAULT_MAX_K,
            threshold: DEFAULT_THRESHOLD,
            types: None,
            as_of: None,
            include_superseded: false,
        }
    }
}

impl RetrievalParams {
    pub fn with_limits(max_k: usize, threshold: f64) -> Self {
        RetrievalParams { max_k, threshold, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_k == 0 {
            return Err(MemError::InvalidParams("max_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(MemError::InvalidParams(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }

    fn type_mask(&self) -> u16 {
        match &self.types {
            None => u16::MAX,
            Some(set) => set.iter().fold(0u16, |m, t| m | 1 << t.index()),
        }
    }

    /// Type and temporal filters, applied before scoring.
    pub fn admits(&self, record: &MemoryRecord) -> bool {
        self.type_mask() & (1 << record.memory_type.index()) != 0 && self.admits_state(record)
    }

    fn admits_state(&self, r: &MemoryRecord) -> bool {
        if let Some(t) = self.as_of {
            r.state != RecordState::Retired
                && r.created_at <= t
                && r.superseded_at.is_none_or(|s| t < s)
        } else if self.include_superseded {
            r.state != RecordState::Retired
        } else {
            r.state == RecordState::Active
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub record: MemoryRecord,
    pub score: f64,
    pub age_ms: i64,
}

/// Result order: score descending, then newer first, then id ascending.
pub fn hit_order(a: (f64, &MemoryRecord), b: (f64, &MemoryRecord)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.created_at.cmp(&a.1.created_at))
        .then_with(|| a.1.id.cmp(&b.1.id))
}

/// Exhaustive search: every admitted candidate is scored.
pub fn search<'a, I>(
    query: &BinaryCode,
    candidates: I,
    params: &RetrievalParams,
    stats: &BitStats,
    now: Millis,
) -> Result<Vec<ScoredHit>>
where
    I: IntoIterator<Item = &'a MemoryRecord>,
{
    let candidates: Vec<&MemoryRecord> = candidates.into_iter().collect();
    search_parallel(query, &candidates, params, stats, now, 1)
}

/// [`search`] with the candidate scan split across `workers` threads. Output is
/// identical for every worker count.
pub fn search_parallel(
    query: &BinaryCode,
    candidates: &[&MemoryRecord],
    params: &RetrievalParams,
    stats: &BitStats,
    now: Millis,
    workers: usize,
) -> Result<Vec<ScoredHit>> {
    params.validate()?;
    check_dims(stats.dimension(), query.dimension())?;
    let table = WeightTable::from_stats(stats)?;
    let dim = query.dimension();
    if let Some(bad) = candidates.iter().find(|r| r.code.dimension() != dim) {
        return Err(MemError::DimensionMismatch { expected: dim, actual: bad.code.dimension() });
    }

    let workers = workers.max(1).min(candidates.len().max(1));
    let partials: Vec<Vec<(f64, &MemoryRecord)>> = if workers == 1 {
        vec![scan(&table, query, candidates, params)]
    } else {
        let chunk = candidates.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = candidates
                .chunks(chunk)
                .map(|part| {
                    let table = &table;
                    s.spawn(move || scan(table, query, part, params))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scan worker panicked")).collect()
        })
    };

    let mut merged: Vec<(f64, &MemoryRecord)> = partials.into_iter().flatten().collect();
    merged.sort_unstable_by(|a, b| hit_order(*a, *b));
    merged.truncate(params.max_k);
    Ok(merged
        .into_iter()
        .map(|(score, r)| ScoredHit {
            record: r.clone(),
            score,
            age_ms: now as i64 - r.created_at as i64,
        })
        .collect())
}

/// Scores one partition and keeps its best `max_k` hits.
fn scan<'a>(
    table: &WeightTable,
    query: &BinaryCode,
    part: &[&'a MemoryRecord],
    params: &RetrievalParams,
) -> Vec<(f64, &'a MemoryRecord)> {
    let q = query.bytes();
    let mask = params.type_mask();
    let mut hits: Vec<(f64, &MemoryRecord)> = Vec::new();
    for &r in part {
        if mask & (1 << r.memory_type.index()) == 0 || !params.admits_state(r) {
            continue;
        }
        let score = table.score_bytes(q, r.code.bytes());
        if score >= params.threshold {
            hits.push((score, r));
        }
    }
    if hits.len() > params.max_k {
        hits.select_nth_unstable_by(params.max_k - 1, |a, b| hit_order(*a, *b));
        hits.truncate(params.max_k);
    }
    hits
}
