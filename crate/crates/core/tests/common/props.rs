//! Score and search properties shared by the property tests and the
//! acceptance run. Each check takes generated inputs and fails with a
//! counterexample message.
#![allow(dead_code)]

use std::collections::BTreeSet;

use memgrain_core::its::{bit_weights, its_score, search, search_parallel, WeightTable};
use memgrain_core::model::Provenance;
use memgrain_core::{BinaryCode, BitStats, MemoryRecord, MemoryType, RecordId, RecordState, RetrievalParams};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const TOL: f64 = 1e-12;

pub fn code_strategy(dim: usize) -> impl Strategy<Value = BinaryCode> {
    prop::collection::vec(any::<u8>(), dim / 8).prop_map(BinaryCode::from_bytes)
}

pub fn weights_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, dim)
}

/// Fixed-point matched-weight fraction, written out bit by bit.
pub fn oracle_score(q: &BinaryCode, d: &BinaryCode, w: &[f64]) -> f64 {
    let fixed: Vec<u64> = w.iter().map(|x| ((x * 4294967296.0).round() as u64).max(1)).collect();
    let total: u64 = fixed.iter().sum();
    let matched: u64 = (0..q.dimension()).filter(|&i| q.bit(i) == d.bit(i)).map(|i| fixed[i]).sum();
    matched as f64 / total as f64
}

pub fn oracle_search(q: &BinaryCode, recs: &[MemoryRecord], p: &RetrievalParams, w: &[f64]) -> Vec<(RecordId, f64)> {
    let mut hits: Vec<(f64, &MemoryRecord)> = recs
        .iter()
        .filter(|r| p.types.as_ref().is_none_or(|t| t.contains(&r.memory_type)))
        .filter(|r| match p.as_of {
            Some(t) => {
                r.state != RecordState::Retired && r.created_at <= t && r.superseded_at.is_none_or(|s| t < s)
            }
            None if p.include_superseded => r.state != RecordState::Retired,
            None => r.state == RecordState::Active,
        })
        .map(|r| (oracle_score(q, &r.code, w), r))
        .filter(|(s, _)| *s >= p.threshold)
        .collect();
    hits.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.created_at.cmp(&a.1.created_at))
            .then(a.1.id.cmp(&b.1.id))
    });
    hits.into_iter().take(p.max_k).map(|(s, r)| (r.id, s)).collect()
}

pub const STATES: [RecordState; 4] =
    [RecordState::Active, RecordState::Active, RecordState::Superseded, RecordState::Retired];

pub fn record_strategy(dim: usize) -> impl Strategy<Value = MemoryRecord> {
    (code_strategy(dim), 0usize..4, 0u64..50, any::<u64>(), 0usize..4, 0u64..30).prop_map(
        move |(code, ty, created, entropy, st, gap)| {
            let state = STATES[st];
            let superseded = state == RecordState::Superseded;
            MemoryRecord {
                id: RecordId::from_u128(u128::from(created) << 80 | u128::from(entropy)),
                namespace: "p".into(),
                session_id: "s".into(),
                memory_type: MemoryType::ALL[ty],
                content: "x".into(),
                tags: BTreeSet::new(),
                code,
                created_at: created,
                superseded_at: superseded.then_some(created + gap),
                state,
                superseded_by: superseded.then(|| RecordId::from_u128(1)),
                conflict_flag: false,
                provenance: Provenance::Stated,
            }
        },
    )
}

pub fn params_strategy() -> impl Strategy<Value = RetrievalParams> {
    (
        1usize..40,
        prop_oneof![Just(0.0), 0.0f64..=1.0, 0.4f64..0.7],
        prop::option::of(prop::collection::btree_set(0usize..4, 1..4)),
        prop::option::of(0u64..80),
        any::<bool>(),
    )
        .prop_map(|(max_k, threshold, types, as_of, include_superseded)| RetrievalParams {
            max_k,
            threshold,
            types: types.map(|s| s.into_iter().map(|i| MemoryType::ALL[i]).collect()),
            as_of,
            include_superseded,
        })
}

pub fn stats_of(recs: &[MemoryRecord], dim: usize) -> BitStats {
    let mut s = BitStats::new(dim);
    for r in recs {
        s.update(&r.code).unwrap();
    }
    s
}

pub fn ids(hits: &[memgrain_core::ScoredHit]) -> Vec<(RecordId, f64)> {
    hits.iter().map(|h| (h.record.id, h.score)).collect()
}

pub type ScoreInput = (BinaryCode, BinaryCode, Vec<f64>);

pub fn score_input() -> impl Strategy<Value = ScoreInput> {
    (1usize..=32).prop_flat_map(|b| (code_strategy(b * 8), code_strategy(b * 8), weights_strategy(b * 8)))
}

pub fn check_score((q, d, w): ScoreInput) -> Result<(), TestCaseError> {
    let s = its_score(&q, &d, &w).unwrap();
    prop_assert!((0.0..=1.0).contains(&s));
    prop_assert_eq!(its_score(&q, &q, &w).unwrap(), 1.0);
    prop_assert_eq!(s, its_score(&d, &q, &w).unwrap());
    prop_assert_eq!(s, oracle_score(&q, &d, &w));
    prop_assert_eq!(s, WeightTable::new(&w).unwrap().score(&q, &d).unwrap());

    let dim = q.dimension() as f64;
    let uniform = its_score(&q, &d, &vec![0.7; q.dimension()]).unwrap();
    let ham = f64::from(q.hamming(&d).unwrap());
    prop_assert!((uniform - (1.0 - ham / dim)).abs() <= TOL);
    Ok(())
}

pub fn weights_input() -> impl Strategy<Value = Vec<BinaryCode>> {
    prop::collection::vec(code_strategy(64), 0..20)
}

pub fn check_weights(codes: Vec<BinaryCode>) -> Result<(), TestCaseError> {
    let mut s = BitStats::new(64);
    for c in &codes {
        s.update(c).unwrap();
    }
    for w in bit_weights(&s) {
        prop_assert!(w > 0.0 && w <= 1.0);
    }
    Ok(())
}

pub type MonotoneInput = (Vec<MemoryRecord>, BinaryCode, RetrievalParams, f64, f64, usize);

pub fn monotone_input() -> impl Strategy<Value = MonotoneInput> {
    (
        prop::collection::vec(record_strategy(64), 0..60),
        code_strategy(64),
        params_strategy(),
        0.0f64..=1.0,
        0.0f64..=1.0,
        1usize..60,
    )
}

pub fn check_monotone((recs, q, p, lo, hi, k2): MonotoneInput) -> Result<(), TestCaseError> {
    let stats = stats_of(&recs, 64);
    let (lo, hi) = (lo.min(hi), lo.max(hi));
    let run = |p: &RetrievalParams| ids(&search(&q, &recs, p, &stats, 100).unwrap());
    let strict = run(&RetrievalParams { threshold: hi, ..p.clone() });
    let loose = run(&RetrievalParams { threshold: lo, ..p.clone() });
    prop_assert!(strict.len() <= loose.len());
    prop_assert_eq!(&loose[..strict.len()], &strict[..]);

    let (k_lo, k_hi) = (p.max_k.min(k2), p.max_k.max(k2));
    let small = run(&RetrievalParams { max_k: k_lo, ..p.clone() });
    let big = run(&RetrievalParams { max_k: k_hi, ..p.clone() });
    prop_assert!(small.len() <= k_lo);
    prop_assert_eq!(&big[..small.len()], &small[..]);
    Ok(())
}

pub type OracleInput = (Vec<MemoryRecord>, BinaryCode, RetrievalParams, usize);

pub fn oracle_input() -> impl Strategy<Value = OracleInput> {
    (prop::collection::vec(record_strategy(64), 0..120), code_strategy(64), params_strategy(), 1usize..9)
}

pub fn check_oracle((recs, q, p, workers): OracleInput) -> Result<(), TestCaseError> {
    let stats = stats_of(&recs, 64);
    let want = oracle_search(&q, &recs, &p, &bit_weights(&stats));
    let got = search(&q, &recs, &p, &stats, 100).unwrap();
    prop_assert_eq!(ids(&got), want);
    for h in &got {
        prop_assert_eq!(h.age_ms, 100 - h.record.created_at as i64);
    }
    let refs: Vec<&MemoryRecord> = recs.iter().collect();
    let par = search_parallel(&q, &refs, &p, &stats, 100, workers).unwrap();
    prop_assert_eq!(par, got);
    Ok(())
}

/// Runs every property with a fixed-seed runner and returns the case counts.
pub fn run_suite(cases: u32, oracle_cases: u32) -> Result<u32, String> {
    fn go<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<u32, String> {
        let mut runner = TestRunner::new_with_rng(
            Config { cases, failure_persistence: None, ..Config::default() },
            proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
        );
        runner.run(&s, f).map_err(|e| e.to_string())?;
        Ok(cases)
    }
    Ok(go(cases, score_input(), check_score)?
        + go(cases, weights_input(), check_weights)?
        + go(cases, monotone_input(), check_monotone)?
        + go(oracle_cases, oracle_input(), check_oracle)?)
}
