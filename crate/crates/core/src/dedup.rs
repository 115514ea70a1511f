//! Exact and near-duplicate removal.
//!
//! Near duplicates are found with MinHash signatures over token shingles and
//! LSH banding. Banding only proposes candidates; every candidate pair is
//! verified with the exact Jaccard similarity of the shingle sets before it
//! joins a cluster.

use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{derive_seed, fnv1a64, splitmix64};
use crate::model::Document;
use crate::tokenize::{TokenizerConfig, Tokens};

#[derive(Debug, Error, PartialEq)]
pub enum DedupError {
    #[error("bands ({bands}) x rows_per_band ({rows}) must equal num_hashes ({num_hashes})")]
    Banding { bands: usize, rows: usize, num_hashes: usize },
    #[error("shingle_size must be at least 1")]
    ShingleSize,
    #[error("jaccard threshold {0} outside (0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinHashConfig {
    /// Shingle width in tokens.
    pub shingle_size: usize,
    pub num_hashes: usize,
    pub bands: usize,
    pub rows_per_band: usize,
    pub seed: u64,
    /// Minimum verified Jaccard for two documents to be near duplicates.
    pub threshold: f64,
    /// Restrict duplicate detection to documents sharing a `source`.
    pub per_source: bool,
    pub tokenizer: TokenizerConfig,
}

impl Default for MinHashConfig {
    fn default() -> Self {
        MinHashConfig {
            shingle_size: 5,
            num_hashes: 128,
            bands: 16,
            rows_per_band: 8,
            seed: 0,
            threshold: 0.9,
            per_source: false,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl MinHashConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.bands * self.rows_per_band != self.num_hashes {
            return Err(DedupError::Banding {
                bands: self.bands,
                rows: self.rows_per_band,
                num_hashes: self.num_hashes,
            });
        }
        if self.shingle_size == 0 {
            return Err(DedupError::ShingleSize);
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(DedupError::Threshold(self.threshold));
        }
        Ok(())
    }
}

/// Trims and collapses whitespace runs to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn text_digest(text: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(normalize_text(text).as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactDuplicate {
    pub dropped_id: String,
    pub kept_id: String,
}

#[derive(Debug, Default)]
pub struct ExactDedupOutcome {
    pub kept: Vec<Document>,
    pub dropped: Vec<ExactDuplicate>,
}

/// Keeps the first document for each normalized text; order preserved.
pub fn exact_dedup(docs: Vec<Document>) -> Vec<Document> {
    exact_dedup_with(docs, false).kept
}

pub fn exact_dedup_with(docs: Vec<Document>, per_source: bool) -> ExactDedupOutcome {
    let digests: Vec<[u8; 32]> = docs.par_iter().map(|d| text_digest(&d.text)).collect();
    let mut first: HashMap<(Option<String>, [u8; 32]), String> = HashMap::new();
    let mut out = ExactDedupOutcome::default();
    for (d, digest) in docs.into_iter().zip(digests) {
        let key = (per_source.then(|| d.source.clone()), digest);
        match first.get(&key) {
            Some(kept) => out.dropped.push(ExactDuplicate { dropped_id: d.id, kept_id: kept.clone() }),
            None => {
                first.insert(key, d.id.clone());
                out.kept.push(d);
            }
        }
    }
    out
}

/// Sorted, deduplicated shingle hashes; empty when the text has fewer than
/// `shingle_size` tokens.
pub fn shingle_set(text: &str, config: &MinHashConfig) -> Vec<u64> {
    let toks: Vec<String> = Tokens::new(text, config.tokenizer.scheme)
        .map(|t| if config.tokenizer.lowercase { t.to_lowercase() } else { t.to_string() })
        .collect();
    if toks.len() < config.shingle_size {
        return Vec::new();
    }
    let mut set: Vec<u64> = toks.windows(config.shingle_size).map(|w| fnv1a64(w.join("\u{1f}").as_bytes())).collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// Exact Jaccard of two sorted, deduplicated sets.
pub fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

pub struct MinHasher {
    perm_seeds: Vec<u64>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, seed: u64) -> Self {
        let base = derive_seed(seed, "minhash");
        MinHasher { perm_seeds: (0..num_hashes as u64).map(|i| splitmix64(base.wrapping_add(i))).collect() }
    }

    pub fn signature(&self, shingles: &[u64]) -> Vec<u64> {
        self.perm_seeds.iter().map(|&s| shingles.iter().map(|&x| splitmix64(x ^ s)).min().unwrap_or(u64::MAX)).collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes root so the first-seen doc is the representative
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// One line of the cluster report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearDupCluster {
    pub kept_id: String,
    pub dropped_ids: Vec<String>,
    /// Smallest verified pairwise Jaccard among the edges forming the cluster.
    pub jaccard_min: f64,
}

/// A verified near-duplicate pair, by input position (`a < b`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifiedPair {
    pub a: usize,
    pub b: usize,
    pub jaccard: f64,
}

#[derive(Debug, Default)]
pub struct NearDupResult {
    pub clusters: Vec<NearDupCluster>,
    pub pairs: Vec<VerifiedPair>,
    /// Input positions dropped as near duplicates.
    pub dropped: BTreeSet<usize>,
}

pub fn near_dup_clusters(docs: &[Document], config: &MinHashConfig) -> Result<NearDupResult, DedupError> {
    config.validate()?;
    let shingles: Vec<Vec<u64>> = docs.par_iter().map(|d| shingle_set(&d.text, config)).collect();
    let hasher = MinHasher::new(config.num_hashes, config.seed);
    let signatures: Vec<Option<Vec<u64>>> =
        shingles.par_iter().map(|s| (!s.is_empty()).then(|| hasher.signature(s))).collect();

    let mut candidates: HashSet<(usize, usize)> = HashSet::new();
    for band in 0..config.bands {
        let mut buckets: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        let rows = band * config.rows_per_band..(band + 1) * config.rows_per_band;
        for (i, sig) in signatures.iter().enumerate() {
            let Some(sig) = sig else { continue };
            let mut h = splitmix64(band as u64);
            for &v in &sig[rows.clone()] {
                h = splitmix64(h ^ v);
            }
            let scope = if config.per_source { fnv1a64(docs[i].source.as_bytes()) } else { 0 };
            buckets.entry((scope, h)).or_default().push(i);
        }
        for members in buckets.values().filter(|m| m.len() > 1) {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    candidates.insert((i, j));
                }
            }
        }
    }

    let mut candidates: Vec<(usize, usize)> = candidates.into_iter().collect();
    candidates.sort_unstable();
    let pairs: Vec<VerifiedPair> = candidates
        .par_iter()
        .filter_map(|&(a, b)| {
            let j = jaccard(&shingles[a], &shingles[b]);
            (j >= config.threshold).then_some(VerifiedPair { a, b, jaccard: j })
        })
        .collect();

    let mut uf = UnionFind::new(docs.len());
    for p in &pairs {
        uf.union(p.a, p.b);
    }
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut min_edge: HashMap<usize, f64> = HashMap::new();
    for p in &pairs {
        let root = uf.find(p.a);
        let e = min_edge.entry(root).or_insert(1.0);
        *e = e.min(p.jaccard);
    }
    for i in 0..docs.len() {
        let root = uf.find(i);
        if min_edge.contains_key(&root) {
            members.entry(root).or_default().push(i);
        }
    }
    let mut roots: Vec<usize> = members.keys().copied().collect();
    roots.sort_unstable();
    let mut result = NearDupResult { pairs, ..Default::default() };
    for root in roots {
        let ids = &members[&root];
        result.dropped.extend(ids[1..].iter().copied());
        result.clusters.push(NearDupCluster {
            kept_id: docs[ids[0]].id.clone(),
            dropped_ids: ids[1..].iter().map(|&i| docs[i].id.clone()).collect(),
            jaccard_min: min_edge[&root],
        });
    }
    Ok(result)
}

#[derive(Debug, Default)]
pub struct DedupOutcome {
    pub kept: Vec<Document>,
    pub exact_dropped: Vec<ExactDuplicate>,
    pub clusters: Vec<NearDupCluster>,
}

/// Exact dedup followed by near-duplicate removal; first occurrence wins.
pub fn dedup(docs: Vec<Document>, config: &MinHashConfig) -> Result<DedupOutcome, DedupError> {
    config.validate()?;
    let exact = exact_dedup_with(docs, config.per_source);
    let near = near_dup_clusters(&exact.kept, config)?;
    let kept = exact.kept.into_iter().enumerate().filter(|(i, _)| !near.dropped.contains(i)).map(|(_, d)| d).collect();
    Ok(DedupOutcome { kept, exact_dropped: exact.dropped, clusters: near.clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Domain, Language};

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text, Language::En, Domain::General, "src", &TokenizerConfig::default())
    }

    const LONG: &str = "the patient presented with fever cough and fatigue for three days before admission to the ward";

    #[test]
    fn exact_keeps_first() {
        let out = exact_dedup(vec![doc("1", "A text"), doc("2", "A text"), doc("3", "B text")]);
        assert_eq!(out.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), vec!["1", "3"]);
        let out = exact_dedup(vec![doc("1", "A  text here"), doc("2", "  A text\n here ")]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "1");
    }

    #[test]
    fn exact_per_source() {
        let mut b = doc("2", "same");
        b.source = "other".into();
        let out = exact_dedup_with(vec![doc("1", "same"), b], true);
        assert_eq!(out.kept.len(), 2);
    }

    #[test]
    fn identical_docs_cluster() {
        let r = near_dup_clusters(&[doc("a", LONG), doc("b", LONG)], &MinHashConfig::default()).unwrap();
        assert_eq!(
            r.clusters,
            vec![NearDupCluster { kept_id: "a".into(), dropped_ids: vec!["b".into()], jaccard_min: 1.0 }]
        );
    }

    #[test]
    fn disjoint_docs_do_not_cluster() {
        let other = "completely unrelated sentence about weather in the mountains during early spring season";
        let r = near_dup_clusters(&[doc("a", LONG), doc("b", other)], &MinHashConfig::default()).unwrap();
        assert!(r.clusters.is_empty());
    }

    #[test]
    fn short_docs_bypass_near_dedup() {
        let r = near_dup_clusters(&[doc("a", "one two"), doc("b", "one two")], &MinHashConfig::default()).unwrap();
        assert!(r.clusters.is_empty());
        let out = dedup(vec![doc("a", "one two"), doc("b", "one two")], &MinHashConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 1);
    }

    #[test]
    fn per_source_scopes_clusters() {
        let mut b = doc("b", LONG);
        b.source = "elsewhere".into();
        let cfg = MinHashConfig { per_source: true, ..Default::default() };
        assert!(near_dup_clusters(&[doc("a", LONG), b], &cfg).unwrap().clusters.is_empty());
    }

    #[test]
    fn jaccard_basics() {
        assert_eq!(jaccard(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
    }

    #[test]
    fn invalid_banding_rejected() {
        let cfg = MinHashConfig { bands: 10, ..Default::default() };
        assert!(matches!(near_dup_clusters(&[], &cfg), Err(DedupError::Banding { .. })));
    }

    #[test]
    fn cluster_merges_transitively_and_reports_min_edge() {
        let base: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let mut v1 = base.clone();
        v1[59] = "x1".into();
        let mut v2 = v1.clone();
        v2[0] = "x2".into();
        let docs = vec![doc("a", &base.join(" ")), doc("b", &v1.join(" ")), doc("c", &v2.join(" "))];
        let r = near_dup_clusters(&docs, &MinHashConfig::default()).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].kept_id, "a");
        assert_eq!(r.clusters[0].dropped_ids, vec!["b", "c"]);
        assert!(r.clusters[0].jaccard_min >= 0.9);
        for p in &r.pairs {
            assert!(p.jaccard >= 0.9);
        }
    }
}
