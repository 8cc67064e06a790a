//! Tiered agent memory: market information, investment reflections and
//! general experience, each an append-only vector store with cosine top-k
//! retrieval over the pooled tiers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

/// Default number of retrieved memories.
pub const DEFAULT_TOP_K: usize = 5;
/// Dimension of the offline hashing embedder.
pub const HASH_EMBED_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("record dated {timestamp} is after the engine clock {now}")]
    FutureTimestamp { timestamp: NaiveDate, now: NaiveDate },
    #[error("record kind {got} does not belong in a {expected} store")]
    WrongKind { expected: MemoryKind, got: MemoryKind },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend failed: {0}")]
    Backend(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = MemoryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    MarketInformation,
    InvestmentReflection,
    GeneralExperience,
}

impl MemoryKind {
    pub const ALL: [MemoryKind; 3] =
        [MemoryKind::MarketInformation, MemoryKind::InvestmentReflection, MemoryKind::GeneralExperience];

    pub fn code(self) -> &'static str {
        match self {
            MemoryKind::MarketInformation => "mi",
            MemoryKind::InvestmentReflection => "ir",
            MemoryKind::GeneralExperience => "ge",
        }
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryKind::MarketInformation => "market-information",
            MemoryKind::InvestmentReflection => "investment-reflection",
            MemoryKind::GeneralExperience => "general-experience",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: String,
    pub kind: MemoryKind,
    pub timestamp: NaiveDate,
    pub text: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A record before the store assigns it an id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub timestamp: NaiveDate,
    pub text: String,
    pub embedding: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl NewRecord {
    pub fn new(timestamp: NaiveDate, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        Self { timestamp, text: text.into(), embedding, metadata: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }
}

/// Append-only store for one memory tier.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    owner: String,
    kind: MemoryKind,
    dim: usize,
    records: Vec<MemoryRecord>,
    next_seq: u64,
}

impl MemoryStore {
    pub fn new(owner: impl Into<String>, kind: MemoryKind, dim: usize) -> Self {
        Self { owner: owner.into(), kind, dim, records: Vec::new(), next_seq: 1 }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Appends a record stamped no later than `now`; returns its id.
    pub fn insert(&mut self, record: NewRecord, now: NaiveDate) -> Result<String> {
        if record.embedding.len() != self.dim {
            return Err(MemoryError::DimensionMismatch { expected: self.dim, got: record.embedding.len() });
        }
        if record.timestamp > now {
            return Err(MemoryError::FutureTimestamp { timestamp: record.timestamp, now });
        }
        let id = format!("{}/{}/{:06}", self.owner, self.kind.code(), self.next_seq);
        self.next_seq += 1;
        self.records.push(MemoryRecord {
            id: id.clone(),
            kind: self.kind,
            timestamp: record.timestamp,
            text: record.text,
            embedding: record.embedding,
            metadata: record.metadata,
        });
        Ok(id)
    }

    /// One JSON record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| MemoryError::Parse { line: 0, message: e.to_string() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, owner: impl Into<String>, kind: MemoryKind, dim: usize) -> Result<Self> {
        let mut store = Self::new(owner, kind, dim);
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MemoryRecord =
                serde_json::from_str(&line).map_err(|e| MemoryError::Parse { line: i + 1, message: e.to_string() })?;
            if rec.kind != kind {
                return Err(MemoryError::WrongKind { expected: kind, got: rec.kind });
            }
            if rec.embedding.len() != dim {
                return Err(MemoryError::DimensionMismatch { expected: dim, got: rec.embedding.len() });
            }
            let seq = rec.id.rsplit('/').next().and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
            store.next_seq = store.next_seq.max(seq + 1);
            store.records.push(rec);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Vec<f64>,
    pub k: usize,
}

impl Query {
    pub fn new(text: impl Into<String>, embedding: Vec<f64>, k: usize) -> Self {
        Self { text: text.into(), embedding, k: k.max(1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// One ranking over the union of all tiers.
    #[default]
    Pooled,
    /// Split `k` across tiers (remainder to the earlier tiers), rank each
    /// tier separately, then merge.
    PerKindQuota,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub score: f64,
    pub record: MemoryRecord,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn rank(a: &(f64, &MemoryRecord), b: &(f64, &MemoryRecord)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| b.1.timestamp.cmp(&a.1.timestamp)).then_with(|| a.1.id.cmp(&b.1.id))
}

/// Top-k records across `stores` by cosine similarity, ignoring anything
/// stamped after `as_of`. Ties go to the newer record, then the smaller id.
pub fn retrieve(
    stores: &[&MemoryStore],
    query: &Query,
    as_of: NaiveDate,
    mode: RetrievalMode,
    exec: Execution,
) -> Vec<Retrieved> {
    let k = query.k.max(1);
    fn score_store<'a>(s: &'a MemoryStore, query: &Query, as_of: NaiveDate) -> Vec<(f64, &'a MemoryRecord)> {
        s.records()
            .iter()
            .filter(|r| r.timestamp <= as_of && r.embedding.len() == query.embedding.len())
            .map(|r| (cosine(&query.embedding, &r.embedding), r))
            .collect()
    }
    let per_store: Vec<Vec<(f64, &MemoryRecord)>> = exec.map(stores, |s| score_store(s, query, as_of));
    let mut scored: Vec<(f64, &MemoryRecord)> = match mode {
        RetrievalMode::Pooled => per_store.into_iter().flatten().collect(),
        RetrievalMode::PerKindQuota => {
            let mut out = Vec::new();
            for (i, kind) in MemoryKind::ALL.iter().enumerate() {
                let quota = k / 3 + usize::from(i < k % 3);
                let mut tier: Vec<_> = per_store.iter().flatten().filter(|(_, r)| r.kind == *kind).copied().collect();
                tier.sort_by(rank);
                out.extend(tier.into_iter().take(quota));
            }
            out
        }
    };
    scored.sort_by(rank);
    scored.truncate(k);
    scored.into_iter().map(|(score, r)| Retrieved { score, record: r.clone() }).collect()
}

/// Text → unit-norm vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic signed feature hashing of lower-cased word tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: HASH_EMBED_DIM, seed: 0x5eed }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x100_0000_01b3);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            tokens.push(lower.trim());
        }
        for t in tokens {
            let h = fnv1a(self.seed, t.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every token cancelled out; fall back to hashing the whole text.
            let h = fnv1a(self.seed ^ 1, lower.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return Ok(v);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(n: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Days::new(n)
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Exhaustive similarity sort, kept independent of `retrieve`.
    fn oracle(stores: &[&MemoryStore], q: &[f64], as_of: NaiveDate, k: usize) -> Vec<String> {
        let mut all: Vec<(f64, NaiveDate, String)> = Vec::new();
        for s in stores {
            for r in s.records() {
                if r.timestamp > as_of {
                    continue;
                }
                let dot: f64 = q.iter().zip(&r.embedding).map(|(a, b)| a * b).sum();
                let nq: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr: f64 = r.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                all.push((dot / (nq * nr), r.timestamp, r.id.clone()));
            }
        }
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2))
        });
        all.into_iter().take(k).map(|x| x.2).collect()
    }

    #[test]
    fn insert_counts_and_ids() {
        let mut s = MemoryStore::new("dave", MemoryKind::MarketInformation, 3);
        let a = s.insert(NewRecord::new(d(0), "same", vec![1.0, 0.0, 0.0]), d(0)).unwrap();
        assert_eq!(s.len(), 1);
        let b = s.insert(NewRecord::new(d(0), "same", vec![1.0, 0.0, 0.0]), d(0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn insert_rejects_future_and_wrong_dim() {
        let mut s = MemoryStore::new("dave", MemoryKind::MarketInformation, 3);
        assert!(matches!(
            s.insert(NewRecord::new(d(5), "x", vec![1.0, 0.0, 0.0]), d(4)),
            Err(MemoryError::FutureTimestamp { .. })
        ));
        assert!(matches!(
            s.insert(NewRecord::new(d(0), "x", vec![1.0, 0.0]), d(4)),
            Err(MemoryError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(s.is_empty());
    }

    #[test]
    fn self_similarity_ranks_first_and_boundary_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = MemoryStore::new("a", MemoryKind::InvestmentReflection, 8);
        let mut embs = vec![];
        for i in 0..3 {
            let e = unit(&mut rng, 8);
            embs.push(e.clone());
            s.insert(NewRecord::new(d(i), format!("r{i}"), e), d(10)).unwrap();
        }
        let q = Query::new("q", embs[1].clone(), 5);
        let got = retrieve(&[&s], &q, d(10), RetrievalMode::Pooled, Execution::Sequential);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].record.text, "r1");
        assert!((got[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_stores_yield_nothing() {
        let s = MemoryStore::new("a", MemoryKind::GeneralExperience, 4);
        let q = Query::new("q", vec![1.0, 0.0, 0.0, 0.0], 5);
        assert!(retrieve(&[&s], &q, d(0), RetrievalMode::Pooled, Execution::Parallel).is_empty());
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_stores() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let mut stores: Vec<MemoryStore> =
                MemoryKind::ALL.iter().map(|k| MemoryStore::new("x", *k, 16)).collect();
            let n = rng.random_range(1..200);
            for i in 0..n {
                let s = &mut stores[i % 3];
                let e = unit(&mut rng, 16);
                s.insert(NewRecord::new(d(rng.random_range(0..30)), "t", e), d(30)).unwrap();
            }
            let refs: Vec<&MemoryStore> = stores.iter().collect();
            let q = unit(&mut rng, 16);
            let as_of = d(20 + trial % 10);
            for k in [1, 5, 200] {
                let got: Vec<String> = retrieve(&refs, &Query::new("q", q.clone(), k), as_of, RetrievalMode::Pooled, Execution::Parallel)
                    .into_iter()
                    .map(|r| r.record.id)
                    .collect();
                assert_eq!(got, oracle(&refs, &q, as_of, k));
            }
        }
    }

    #[test]
    fn ties_break_newer_then_id() {
        let mut s = MemoryStore::new("a", MemoryKind::MarketInformation, 2);
        s.insert(NewRecord::new(d(1), "old", vec![1.0, 0.0]), d(9)).unwrap();
        s.insert(NewRecord::new(d(3), "new", vec![1.0, 0.0]), d(9)).unwrap();
        s.insert(NewRecord::new(d(3), "new2", vec![1.0, 0.0]), d(9)).unwrap();
        let got = retrieve(&[&s], &Query::new("q", vec![1.0, 0.0], 3), d(9), RetrievalMode::Pooled, Execution::Sequential);
        let texts: Vec<&str> = got.iter().map(|r| r.record.text.as_str()).collect();
        assert_eq!(texts, ["new", "new2", "old"]);
    }

    #[test]
    fn gating_hides_future_records() {
        let mut s = MemoryStore::new("a", MemoryKind::MarketInformation, 2);
        s.insert(NewRecord::new(d(5), "later", vec![1.0, 0.0]), d(9)).unwrap();
        let got = retrieve(&[&s], &Query::new("q", vec![1.0, 0.0], 5), d(4), RetrievalMode::Pooled, Execution::Sequential);
        assert!(got.is_empty());
    }

    #[test]
    fn quota_mode_spreads_across_tiers() {
        let mut stores: Vec<MemoryStore> = MemoryKind::ALL.iter().map(|k| MemoryStore::new("x", *k, 2)).collect();
        for _ in 0..5 {
            stores[0].insert(NewRecord::new(d(0), "mi", vec![1.0, 0.0]), d(0)).unwrap();
            stores[1].insert(NewRecord::new(d(0), "ir", vec![0.0, 1.0]), d(0)).unwrap();
            stores[2].insert(NewRecord::new(d(0), "ge", vec![0.5, 0.5]), d(0)).unwrap();
        }
        let refs: Vec<&MemoryStore> = stores.iter().collect();
        let q = Query::new("q", vec![1.0, 0.0], 5);
        let pooled = retrieve(&refs, &q, d(0), RetrievalMode::Pooled, Execution::Sequential);
        assert!(pooled.iter().all(|r| r.record.kind == MemoryKind::MarketInformation));
        let quota = retrieve(&refs, &q, d(0), RetrievalMode::PerKindQuota, Execution::Sequential);
        let count = |k| quota.iter().filter(|r| r.record.kind == k).count();
        assert_eq!(
            (count(MemoryKind::MarketInformation), count(MemoryKind::InvestmentReflection), count(MemoryKind::GeneralExperience)),
            (2, 2, 1)
        );
    }

    #[test]
    fn persistence_reproduces_retrieval_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = MemoryStore::new("bob", MemoryKind::InvestmentReflection, 16);
        for i in 0..50 {
            s.insert(NewRecord::new(d(i % 7), format!("r{i}"), unit(&mut rng, 16)).with_meta("pnl", i), d(10)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.jsonl");
        s.save_jsonl(&path).unwrap();
        let mut back = MemoryStore::load_jsonl(&path, "bob", MemoryKind::InvestmentReflection, 16).unwrap();
        assert_eq!(back, s);
        let q = Query::new("q", unit(&mut rng, 16), 5);
        let a = retrieve(&[&s], &q, d(10), RetrievalMode::Pooled, Execution::Sequential);
        let b = retrieve(&[&back], &q, d(10), RetrievalMode::Pooled, Execution::Sequential);
        assert_eq!(a, b);
        let id = back.insert(NewRecord::new(d(10), "new", unit(&mut rng, 16)), d(10)).unwrap();
        assert!(s.get(&id).is_none());
    }

    #[test]
    fn hash_embedder_contract() {
        let e = HashEmbedder::default();
        let a = e.embed("Bitcoin rallies on ETF news").unwrap();
        assert_eq!(a, e.embed("Bitcoin rallies on ETF news").unwrap());
        assert_eq!(a.len(), HASH_EMBED_DIM);
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert!(matches!(e.embed("  "), Err(MemoryError::EmptyText)));
        let p = e.embed("!!!").unwrap();
        assert!((p.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unrelated_texts_are_distinguishable() {
        let corpus = [
            "Bitcoin price surges past resistance",
            "Federal Reserve holds interest rates steady",
            "Dow Jones closes lower on tech selloff",
            "Euro weakens against the dollar",
            "Crypto exchange reports record volume",
            "Oil prices climb after supply cut",
            "Treasury yields rise on inflation data",
            "Retail sales beat expectations",
            "Gold slips as dollar strengthens",
            "Manufacturing index contracts again",
            "Central bank signals policy shift",
            "Miners capitulate as hash rate drops",
            "Earnings season starts with bank results",
            "Unemployment claims fall to new low",
            "Stablecoin regulation bill advances",
            "Yen hits multi decade low",
            "Housing starts unexpectedly jump",
            "Consumer confidence drops sharply",
            "Semiconductor stocks lead rebound",
            "Volatility index spikes overnight",
        ];
        let e = HashEmbedder::default();
        let vs: Vec<Vec<f64>> = corpus.iter().map(|t| e.embed(t).unwrap()).collect();
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                assert!(cosine(&vs[i], &vs[j]) < 0.99, "{} ~ {}", corpus[i], corpus[j]);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn insertion_order_does_not_change_ranking(seed in 0u64..1000, n in 1usize..60) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let items: Vec<(NaiveDate, Vec<f64>)> = (0..n).map(|i| (d(i as u64 % 5), unit(&mut rng, 8))).collect();
                let q = unit(&mut rng, 8);
                // Same ids, reversed insertion order.
                let build = |order: Vec<usize>| {
                    let mut recs: Vec<MemoryRecord> = order.iter().map(|&i| MemoryRecord {
                        id: format!("r{i:04}"), kind: MemoryKind::MarketInformation,
                        timestamp: items[i].0, text: String::new(), embedding: items[i].1.clone(),
                        metadata: BTreeMap::new(),
                    }).collect();
                    let mut s = MemoryStore::new("p", MemoryKind::MarketInformation, 8);
                    s.records.append(&mut recs);
                    s
                };
                let a = build((0..n).collect());
                let b = build((0..n).rev().collect());
                let qa = Query::new("q", q.clone(), 5);
                let ra: Vec<String> = retrieve(&[&a], &qa, d(10), RetrievalMode::Pooled, Execution::Sequential).into_iter().map(|r| r.record.id).collect();
                let rb: Vec<String> = retrieve(&[&b], &qa, d(10), RetrievalMode::Pooled, Execution::Sequential).into_iter().map(|r| r.record.id).collect();
                prop_assert_eq!(ra, rb);
            }
        }
    }
}
