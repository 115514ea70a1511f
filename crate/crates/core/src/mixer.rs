//! Two-stage continual-pretraining mixtures at token-level ratios.
//!
//! A stage mixes two buckets (`medical` + `general` for the stable stage,
//! `corpus` + `sft` for the boost stage) at a bucket ratio and a zh:en ratio.
//! Both ratios are treated as independent marginals, so each
//! (bucket, language) cell gets `budget * bucket_share * language_share`
//! tokens, rounded by largest remainder.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::io::{IngestError, RecordReader};
use crate::model::{Document, Language, Provenance};
use crate::tokenize::{count_tokens, TokenizerConfig};

pub const LANGUAGES: [Language; 2] = [Language::Zh, Language::En];

#[derive(Debug, Error)]
pub enum MixError {
    #[error("invalid mix spec: {0}")]
    Spec(String),
    #[error("cell {cell} has a quota of {quota} tokens but no source documents")]
    EmptyCell { cell: String, quota: u64 },
    #[error("no source given for bucket '{0}'")]
    MissingBucket(String),
    #[error(transparent)]
    Io(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stable,
    Boost,
}

impl Stage {
    /// Bucket names, first one being the numerator of the bucket ratio.
    pub fn buckets(self) -> [&'static str; 2] {
        match self {
            Stage::Stable => ["medical", "general"],
            Stage::Boost => ["corpus", "sft"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stable => "stable",
            Stage::Boost => "boost",
        })
    }
}

/// Where the zh:en ratio is checked. Product-form quotas satisfy both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageScope {
    #[default]
    WholeMix,
    PerBucket,
}

fn default_repeats() -> u32 {
    1
}

fn default_tolerance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub stage: Stage,
    pub domain_ratio: [u64; 2],
    /// zh : en.
    pub language_ratio: [u64; 2],
    pub token_budget: u64,
    #[serde(default)]
    pub seed: u64,
    /// Number of sampling passes allowed over a cell; 1 means no repetition.
    #[serde(default = "default_repeats")]
    pub max_repeats: u32,
    /// Allowed relative deviation of each marginal, in percent.
    #[serde(default = "default_tolerance")]
    pub tolerance_pct: f64,
    #[serde(default)]
    pub language_scope: LanguageScope,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
}

impl MixSpec {
    /// 19:1 medical:general, 1:9 zh:en.
    pub fn stable(token_budget: u64, seed: u64) -> Self {
        Self::with_ratios(Stage::Stable, [19, 1], [1, 9], token_budget, seed)
    }

    /// 1:1 corpus:sft, 4:6 zh:en.
    pub fn boost(token_budget: u64, seed: u64) -> Self {
        Self::with_ratios(Stage::Boost, [1, 1], [4, 6], token_budget, seed)
    }

    pub fn with_ratios(
        stage: Stage,
        domain_ratio: [u64; 2],
        language_ratio: [u64; 2],
        token_budget: u64,
        seed: u64,
    ) -> Self {
        MixSpec {
            stage,
            domain_ratio,
            language_ratio,
            token_budget,
            seed,
            max_repeats: 1,
            tolerance_pct: 1.0,
            language_scope: LanguageScope::WholeMix,
            tokenizer: TokenizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if self.domain_ratio.contains(&0) || self.language_ratio.contains(&0) {
            return Err(MixError::Spec("ratio terms must be positive".into()));
        }
        if self.token_budget == 0 {
            return Err(MixError::Spec("token_budget must be positive".into()));
        }
        if self.max_repeats == 0 {
            return Err(MixError::Spec("max_repeats must be at least 1".into()));
        }
        if !(self.tolerance_pct >= 0.0 && self.tolerance_pct.is_finite()) {
            return Err(MixError::Spec("tolerance_pct must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn bucket_share(&self, k: usize) -> f64 {
        self.domain_ratio[k] as f64 / (self.domain_ratio[0] + self.domain_ratio[1]) as f64
    }

    pub fn language_share(&self, k: usize) -> f64 {
        self.language_ratio[k] as f64 / (self.language_ratio[0] + self.language_ratio[1]) as f64
    }

    /// Cell keys `"<bucket>/<language>"` in plan order.
    pub fn cells(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(4);
        for b in self.stage.buckets() {
            for l in LANGUAGES {
                out.push(format!("{b}/{l}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPlan {
    /// Token quota per `"<bucket>/<language>"` cell.
    pub quotas: BTreeMap<String, u64>,
    pub bucket_totals: BTreeMap<String, u64>,
    pub language_totals: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Splits `total` over `weights` by largest remainder; ties go to the earlier entry.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let denom: u128 = weights.iter().map(|&w| w as u128).sum();
    if denom == 0 {
        return vec![0; weights.len()];
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (k, &w) in weights.iter().enumerate() {
        let num = total as u128 * w as u128;
        out.push((num / denom) as u64);
        rems.push((num % denom, k));
    }
    let left = total - out.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in rems.iter().take(left as usize) {
        out[k] += 1;
    }
    out
}

pub fn plan_mix(spec: &MixSpec) -> Result<MixPlan, MixError> {
    spec.validate()?;
    let buckets = spec.stage.buckets();
    let mut weights = Vec::with_capacity(4);
    for d in spec.domain_ratio {
        for l in spec.language_ratio {
            weights.push(d * l);
        }
    }
    let cells = spec.cells();
    let amounts = apportion(spec.token_budget, &weights);
    let mut plan = MixPlan {
        quotas: BTreeMap::new(),
        bucket_totals: BTreeMap::new(),
        language_totals: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (k, (cell, &q)) in cells.iter().zip(&amounts).enumerate() {
        if q == 0 {
            plan.warnings.push(format!("cell {cell} rounds to a zero quota at budget {}", spec.token_budget));
        }
        plan.quotas.insert(cell.clone(), q);
        *plan.bucket_totals.entry(buckets[k / 2].to_string()).or_insert(0) += q;
        *plan.language_totals.entry(LANGUAGES[k % 2].to_string()).or_insert(0) += q;
    }
    Ok(plan)
}

/// Documents of one bucket together with the file they were read from.
#[derive(Debug, Clone)]
pub struct BucketSource {
    pub bucket: String,
    /// File name recorded in provenance.
    pub file: String,
    pub documents: Vec<Document>,
}

impl BucketSource {
    /// Reads a bucket from a document file. Rejected lines are returned separately.
    pub fn load(bucket: &str, path: &Path) -> Result<(Self, usize), MixError> {
        let mut documents = Vec::new();
        let mut rejects = 0;
        for line in RecordReader::<Document>::open(path)? {
            match line? {
                crate::io::Line::Record(d) => documents.push(d),
                crate::io::Line::Reject(_) => rejects += 1,
            }
        }
        let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok((BucketSource { bucket: bucket.to_string(), file, documents }, rejects))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub cell: String,
    pub quota: u64,
    pub realized: u64,
    pub passes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub stage: Stage,
    pub spec: MixSpec,
    pub quotas: BTreeMap<String, u64>,
    /// Sampled tokens per cell.
    pub realized: BTreeMap<String, u64>,
    /// Relative deviation of each realized marginal share from its target, in percent.
    pub deviation_pct: BTreeMap<String, f64>,
    pub shortfalls: Vec<Shortfall>,
    pub seed: u64,
    pub documents: u64,
    pub ratio_model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn cell_docs(source: &BucketSource, lang: Language) -> Vec<&Document> {
    source.documents.iter().filter(|d| d.language == lang).collect()
}

fn sample_cell(
    cell: &str,
    source: &BucketSource,
    docs: Vec<&Document>,
    quota: u64,
    spec: &MixSpec,
) -> (Vec<Document>, u64, Option<Shortfall>) {
    let mut out = Vec::new();
    let mut realized = 0u64;
    let mut pass = 0;
    while realized < quota && pass < spec.max_repeats {
        pass += 1;
        let mut order = docs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("{cell}#{pass}")));
        order.shuffle(&mut rng);
        for d in order {
            if realized >= quota {
                break;
            }
            let mut doc = d.clone();
            if pass > 1 {
                doc.id = format!("{}#p{pass}", d.id);
            }
            doc.provenance = Some(Provenance {
                bucket: source.bucket.clone(),
                manifest: source.file.clone(),
                origin_id: d.id.clone(),
                pass,
            });
            realized += d.token_count;
            out.push(doc);
        }
    }
    let shortfall = (realized < quota).then(|| Shortfall { cell: cell.to_string(), quota, realized, passes: pass });
    (out, realized, shortfall)
}

fn shares(counts: &BTreeMap<String, u64>, spec: &MixSpec) -> BTreeMap<String, f64> {
    let buckets = spec.stage.buckets();
    let cell = |b: &str, l: Language| counts.get(&format!("{b}/{l}")).copied().unwrap_or(0);
    let total: u64 = counts.values().sum();
    let mut dev = BTreeMap::new();
    let rel = |realized: u64, whole: u64, target: f64| {
        let share = if whole == 0 { 0.0 } else { realized as f64 / whole as f64 };
        (share - target).abs() / target * 100.0
    };
    for (k, b) in buckets.iter().enumerate() {
        let bt: u64 = LANGUAGES.iter().map(|&l| cell(b, l)).sum();
        dev.insert(b.to_string(), rel(bt, total, spec.bucket_share(k)));
    }
    for (k, l) in LANGUAGES.iter().enumerate() {
        match spec.language_scope {
            LanguageScope::WholeMix => {
                let lt: u64 = buckets.iter().map(|b| cell(b, *l)).sum();
                dev.insert(l.to_string(), rel(lt, total, spec.language_share(k)));
            }
            LanguageScope::PerBucket => {
                for b in buckets {
                    let bt: u64 = LANGUAGES.iter().map(|&x| cell(b, x)).sum();
                    dev.insert(format!("{b}/{l}"), rel(cell(b, *l), bt, spec.language_share(k)));
                }
            }
        }
    }
    dev
}

/// Samples each cell without replacement until its quota is met (overshooting
/// by at most one document), repeating reshuffled passes up to `max_repeats`.
/// The result is globally shuffled and every document carries provenance.
pub fn sample_mix(
    sources: &[BucketSource],
    plan: &MixPlan,
    spec: &MixSpec,
) -> Result<(Vec<Document>, MixReport), MixError> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for b in spec.stage.buckets() {
        let source = sources.iter().find(|s| s.bucket == b);
        for l in LANGUAGES {
            let cell = format!("{b}/{l}");
            let quota = plan.quotas.get(&cell).copied().unwrap_or(0);
            if quota == 0 {
                continue;
            }
            let source = source.ok_or_else(|| MixError::MissingBucket(b.to_string()))?;
            let docs = cell_docs(source, l);
            if docs.is_empty() {
                return Err(MixError::EmptyCell { cell, quota });
            }
            jobs.push((cell, source, docs, quota));
        }
    }
    let sampled: Vec<_> = jobs
        .into_par_iter()
        .map(|(cell, source, docs, quota)| {
            let (out, realized, short) = sample_cell(&cell, source, docs, quota, spec);
            (cell, out, realized, short)
        })
        .collect();
    let mut realized = BTreeMap::new();
    for cell in spec.cells() {
        realized.insert(cell, 0);
    }
    let mut shortfalls = Vec::new();
    let mut output = Vec::new();
    for (cell, docs, got, short) in sampled {
        realized.insert(cell, got);
        shortfalls.extend(short);
        output.extend(docs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "global-shuffle"));
    output.shuffle(&mut rng);
    let report = MixReport {
        stage: spec.stage,
        spec: spec.clone(),
        quotas: plan.quotas.clone(),
        deviation_pct: shares(&realized, spec),
        realized,
        shortfalls,
        seed: spec.seed,
        documents: output.len() as u64,
        ratio_model: "product of independent bucket and language marginals".into(),
        warnings: plan.warnings.clone(),
    };
    Ok((output, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub total_tokens: u64,
    /// Recounted tokens per cell.
    pub realized: BTreeMap<String, u64>,
    pub deviation_pct: BTreeMap<String, f64>,
    /// `Some(true)` when the recount equals the mix report's realized totals.
    pub matches_report: Option<bool>,
    pub failures: Vec<String>,
}

/// Re-reads a mixed dataset, recounts tokens from the text with the spec's
/// tokenizer and checks every marginal against the tolerance.
pub fn verify_mix(path: &Path, spec: &MixSpec, report: Option<&MixReport>) -> Result<VerifyReport, MixError> {
    spec.validate()?;
    let buckets: BTreeSet<&str> = spec.stage.buckets().into_iter().collect();
    let mut realized: BTreeMap<String, u64> = spec.cells().into_iter().map(|c| (c, 0)).collect();
    let mut failures = Vec::new();
    let mut other_tokens = 0u64;
    let mut seen = HashSet::new();
    for line in RecordReader::<Document>::open(path)? {
        let doc = match line? {
            crate::io::Line::Record(d) => d,
            crate::io::Line::Reject(r) => {
                failures.push(format!("line {}: {}", r.line, r.reason));
                continue;
            }
        };
        let tokens = count_tokens(&doc.text, &spec.tokenizer) as u64;
        let Some(p) = &doc.provenance else {
            failures.push(format!("{}: missing provenance", doc.id));
            continue;
        };
        if !seen.insert((p.manifest.clone(), p.origin_id.clone(), p.pass)) {
            failures.push(format!("{}: duplicate draw of {} in pass {}", doc.id, p.origin_id, p.pass));
        }
        if !buckets.contains(p.bucket.as_str()) || !LANGUAGES.contains(&doc.language) {
            other_tokens += tokens;
            continue;
        }
        *realized.entry(format!("{}/{}", p.bucket, doc.language)).or_insert(0) += tokens;
    }
    let total_tokens = realized.values().sum::<u64>() + other_tokens;
    if total_tokens == 0 {
        failures.push("dataset has zero tokens".into());
    }
    if other_tokens > 0 {
        failures.push(format!("{other_tokens} tokens outside the stage's buckets or languages"));
    }
    let mut deviation_pct = shares(&realized, spec);
    if other_tokens > 0 {
        let mut with_other = realized.clone();
        with_other.insert("other/other".into(), other_tokens);
        deviation_pct = shares(&with_other, spec);
    }
    for (k, d) in &deviation_pct {
        if d.is_nan() || *d > spec.tolerance_pct {
            failures.push(format!("{k} deviates {d:.3}% (tolerance {}%)", spec.tolerance_pct));
        }
    }
    let matches_report = report.map(|r| r.realized == realized);
    if matches_report == Some(false) {
        failures.push("recounted cell totals differ from the mix report".into());
    }
    Ok(VerifyReport { passed: failures.is_empty(), total_tokens, realized, deviation_pct, matches_report, failures })
}
