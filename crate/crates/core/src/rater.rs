//! Agreement filters around pluggable raters.
//!
//! [`double_score_filter`] scores each document twice and drops those whose
//! two scores disagree by at least the discrepancy threshold.
//! [`two_round_agreement`] labels each document twice and keeps it only when
//! both labels match.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::model::{Document, Domain};
use crate::protocol::LineClient;
use crate::scoring::ScoreError;

pub const SCORE_MAX: f64 = 5.0;
pub const DEFAULT_DISCREPANCY: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RaterError {
    #[error("{id}: round {round} score {score} outside [0, 5]")]
    OutOfRange { id: String, round: u8, score: f64 },
    #[error("{id}: round {round} returned an empty label")]
    EmptyLabel { id: String, round: u8 },
    #[error("{id}: round {round}: {source}")]
    Call { id: String, round: u8, source: ScoreError },
    #[error("discrepancy threshold must be positive and finite, got {0}")]
    Threshold(f64),
}

pub trait Rater: Send + Sync {
    fn identity(&self) -> String;

    /// Quality score in `[0, 5]` for one round (1 or 2).
    fn score(&self, id: &str, text: &str, round: u8) -> Result<f64, RaterError>;
}

pub trait Labeler: Send + Sync {
    fn identity(&self) -> String;

    fn label(&self, id: &str, text: &str, round: u8) -> Result<String, RaterError>;
}

fn record_rng(seed: u64, id: &str, round: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{id}\u{1f}{round}")))
}

/// Seeded stand-in rater. Each document gets a latent score on the half-point
/// grid of `[0, 5]`; each round adds independent noise of up to `noise`
/// half-points in either direction, clamped to the range.
#[derive(Debug, Clone, Copy)]
pub struct StubRater {
    pub seed: u64,
    pub noise: u32,
}

impl StubRater {
    pub fn new(seed: u64) -> Self {
        StubRater { seed, noise: 3 }
    }

    pub fn latent(&self, id: &str) -> f64 {
        record_rng(self.seed, id, 0).gen_range(0..=10u32) as f64 / 2.0
    }
}

impl Rater for StubRater {
    fn identity(&self) -> String {
        format!("stub-rater:seed={}:noise={}", self.seed, self.noise)
    }

    fn score(&self, id: &str, _text: &str, round: u8) -> Result<f64, RaterError> {
        let n = self.noise as i64;
        let step = record_rng(self.seed, id, round).gen_range(-n..=n);
        let half_points = (self.latent(id) * 2.0) as i64 + step;
        Ok(half_points.clamp(0, 10) as f64 / 2.0)
    }
}

/// Seeded stand-in labeler. Each document has a fixed true label; each round
/// independently replaces it, with probability `flip_rate`, by a different
/// label drawn uniformly from the rest.
#[derive(Debug, Clone)]
pub struct StubLabeler {
    pub seed: u64,
    pub flip_rate: f64,
    pub labels: Vec<String>,
}

impl StubLabeler {
    pub fn new(seed: u64, flip_rate: f64) -> Self {
        StubLabeler { seed, flip_rate, labels: vec!["medical".into(), "general".into()] }
    }

    pub fn true_label(&self, id: &str) -> &str {
        let k = record_rng(self.seed, id, 0).gen_range(0..self.labels.len());
        &self.labels[k]
    }

    /// Probability that the two rounds agree: both keep the true label, or
    /// both flip to the same other label.
    pub fn agreement_probability(&self) -> f64 {
        let p = self.flip_rate;
        let others = (self.labels.len() - 1) as f64;
        (1.0 - p).powi(2) + p * p / others
    }
}

impl Labeler for StubLabeler {
    fn identity(&self) -> String {
        format!("stub-labeler:seed={}:flip={}:labels={}", self.seed, self.flip_rate, self.labels.join(","))
    }

    fn label(&self, id: &str, _text: &str, round: u8) -> Result<String, RaterError> {
        let truth = self.true_label(id);
        let mut rng = record_rng(self.seed, id, round);
        if self.labels.len() < 2 || !rng.gen_bool(self.flip_rate) {
            return Ok(truth.to_string());
        }
        let others: Vec<&String> = self.labels.iter().filter(|l| l.as_str() != truth).collect();
        Ok(others[rng.gen_range(0..others.len())].clone())
    }
}

fn remote_request(client: &LineClient, id: &str, text: &str, round: u8) -> Result<Value, RaterError> {
    let req = json!({"id": client.fresh_id("q"), "text": text, "round": round});
    client.call(req).map_err(|source| RaterError::Call { id: id.to_string(), round, source })
}

fn protocol_error(id: &str, round: u8, message: &str) -> RaterError {
    RaterError::Call {
        id: id.to_string(),
        round,
        source: ScoreError::Protocol { request_id: None, message: message.to_string() },
    }
}

/// Rater served over the line protocol: `{"id","text","round"}` -> `{"id","score"}`.
pub struct ExternalRater {
    client: LineClient,
}

impl ExternalRater {
    pub fn new(client: LineClient) -> Self {
        ExternalRater { client }
    }

    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ScoreError> {
        Ok(Self::new(LineClient::connect(endpoint, timeout)?))
    }
}

impl Rater for ExternalRater {
    fn identity(&self) -> String {
        self.client.model().to_string()
    }

    fn score(&self, id: &str, text: &str, round: u8) -> Result<f64, RaterError> {
        let v = remote_request(&self.client, id, text, round)?;
        let score =
            v.get("score").and_then(Value::as_f64).ok_or_else(|| protocol_error(id, round, "missing numeric score"))?;
        if !(0.0..=SCORE_MAX).contains(&score) {
            return Err(RaterError::OutOfRange { id: id.to_string(), round, score });
        }
        Ok(score)
    }
}

/// Labeler served over the line protocol: `{"id","text","round"}` -> `{"id","label"}`.
pub struct ExternalLabeler {
    client: LineClient,
}

impl ExternalLabeler {
    pub fn new(client: LineClient) -> Self {
        ExternalLabeler { client }
    }

    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ScoreError> {
        Ok(Self::new(LineClient::connect(endpoint, timeout)?))
    }
}

impl Labeler for ExternalLabeler {
    fn identity(&self) -> String {
        self.client.model().to_string()
    }

    fn label(&self, id: &str, text: &str, round: u8) -> Result<String, RaterError> {
        let v = remote_request(&self.client, id, text, round)?;
        v.get("label")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| protocol_error(id, round, "missing string label"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedRecord {
    pub id: String,
    pub score_round1: f64,
    pub score_round2: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub label_round1: String,
    pub label_round2: String,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition<R> {
    pub kept: Vec<Document>,
    pub removed: Vec<Document>,
    /// One entry per successfully rated document, in input order.
    pub records: Vec<R>,
    pub errors: Vec<(Document, RaterError)>,
}

/// Keep rule shared by the filter and its callers: strict inequality.
pub fn within_discrepancy(a: f64, b: f64, threshold: f64) -> bool {
    (a - b).abs() < threshold
}

fn checked_score<T: Rater + ?Sized>(rater: &T, doc: &Document, round: u8) -> Result<f64, RaterError> {
    let s = rater.score(&doc.id, &doc.text, round)?;
    if !(0.0..=SCORE_MAX).contains(&s) {
        return Err(RaterError::OutOfRange { id: doc.id.clone(), round, score: s });
    }
    Ok(s)
}

/// Scores every document twice; removes those with `|s1 - s2| >= threshold`
/// and stores the mean of the two scores as `quality_score` on kept ones.
pub fn double_score_filter<T: Rater + ?Sized>(
    docs: Vec<Document>,
    rater: &T,
    threshold: f64,
) -> Result<Partition<RatedRecord>, RaterError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(RaterError::Threshold(threshold));
    }
    let scored: Vec<_> = docs
        .into_par_iter()
        .map(|doc| {
            let (a, b) = rayon::join(|| checked_score(rater, &doc, 1), || checked_score(rater, &doc, 2));
            (doc, a.and_then(|a| b.map(|b| (a, b))))
        })
        .collect();
    let mut out = Partition { kept: Vec::new(), removed: Vec::new(), records: Vec::new(), errors: Vec::new() };
    for (mut doc, res) in scored {
        match res {
            Ok((a, b)) => {
                let kept = within_discrepancy(a, b, threshold);
                out.records.push(RatedRecord { id: doc.id.clone(), score_round1: a, score_round2: b, kept });
                if kept {
                    doc.quality_score = Some((a + b) / 2.0);
                    out.kept.push(doc);
                } else {
                    out.removed.push(doc);
                }
            }
            Err(e) => out.errors.push((doc, e)),
        }
    }
    Ok(out)
}

fn checked_label<T: Labeler + ?Sized>(labeler: &T, doc: &Document, round: u8) -> Result<String, RaterError> {
    let l = labeler.label(&doc.id, &doc.text, round)?;
    if l.trim().is_empty() {
        return Err(RaterError::EmptyLabel { id: doc.id.clone(), round });
    }
    Ok(l)
}

/// Labels every document twice and keeps those with identical labels. The
/// label is stored as `domain_label`, and also as `domain` when it names one.
pub fn two_round_agreement<T: Labeler + ?Sized>(docs: Vec<Document>, labeler: &T) -> Partition<LabeledRecord> {
    let labeled: Vec<_> = docs
        .into_par_iter()
        .map(|doc| {
            let (a, b) = rayon::join(|| checked_label(labeler, &doc, 1), || checked_label(labeler, &doc, 2));
            (doc, a.and_then(|a| b.map(|b| (a, b))))
        })
        .collect();
    let mut out = Partition { kept: Vec::new(), removed: Vec::new(), records: Vec::new(), errors: Vec::new() };
    for (mut doc, res) in labeled {
        match res {
            Ok((a, b)) => {
                let kept = a == b;
                if kept {
                    if let Ok(d) = a.parse::<Domain>() {
                        doc.domain = d;
                    }
                    doc.domain_label = Some(a.clone());
                    out.kept.push(doc.clone());
                } else {
                    out.removed.push(doc.clone());
                }
                out.records.push(LabeledRecord { id: doc.id, label_round1: a, label_round2: b, kept });
            }
            Err(e) => out.errors.push((doc, e)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Language;
    use crate::tokenize::TokenizerConfig;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn doc(id: &str) -> Document {
        Document::new(id, "some text", Language::En, Domain::General, "test", &TokenizerConfig::default())
    }

    struct Fixed(HashMap<String, (f64, f64)>);

    impl Rater for Fixed {
        fn identity(&self) -> String {
            "fixed".into()
        }

        fn score(&self, id: &str, _text: &str, round: u8) -> Result<f64, RaterError> {
            let (a, b) = self.0[id];
            Ok(if round == 1 { a } else { b })
        }
    }

    fn fixed(pairs: &[(&str, f64, f64)]) -> Fixed {
        Fixed(pairs.iter().map(|&(id, a, b)| (id.to_string(), (a, b))).collect())
    }

    struct FixedLabels(Vec<(&'static str, &'static str)>);

    impl Labeler for FixedLabels {
        fn identity(&self) -> String {
            "fixed".into()
        }

        fn label(&self, id: &str, _text: &str, round: u8) -> Result<String, RaterError> {
            let (a, b) = self.0[id.parse::<usize>().unwrap()];
            Ok(if round == 1 { a } else { b }.to_string())
        }
    }

    #[test]
    fn discrepancy_examples() {
        let r = fixed(&[("same", 4.0, 4.0), ("far", 1.0, 3.5), ("edge", 1.0, 3.0), ("near", 1.0, 2.5)]);
        let docs = ["same", "far", "edge", "near"].map(doc).to_vec();
        let out = double_score_filter(docs, &r, DEFAULT_DISCREPANCY).unwrap();
        let kept: Vec<_> = out.kept.iter().map(|d| (d.id.as_str(), d.quality_score)).collect();
        assert_eq!(kept, vec![("same", Some(4.0)), ("near", Some(1.75))]);
        let removed: Vec<_> = out.removed.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(removed, vec!["far", "edge"]);
        assert_eq!(out.records.len(), 4);
    }

    #[test]
    fn out_of_range_goes_to_errors() {
        let r = fixed(&[("bad", 4.0, 5.5)]);
        let out = double_score_filter(vec![doc("bad")], &r, 2.0).unwrap();
        assert!(matches!(out.errors[0].1, RaterError::OutOfRange { round: 2, .. }));
        assert!(double_score_filter(vec![], &r, 0.0).is_err());
    }

    #[test]
    fn label_examples() {
        let l =
            FixedLabels(vec![("medical", "medical"), ("medical", "general"), ("cardiology", "cardiology"), ("", "")]);
        let docs = ["0", "1", "2", "3"].map(doc).to_vec();
        let out = two_round_agreement(docs, &l);
        assert_eq!(out.kept.len(), 2);
        assert_eq!(out.kept[0].domain, Domain::Medical);
        assert_eq!(out.kept[0].domain_label.as_deref(), Some("medical"));
        assert_eq!(out.kept[1].domain, Domain::General);
        assert_eq!(out.kept[1].domain_label.as_deref(), Some("cardiology"));
        assert_eq!(out.removed[0].id, "1");
        assert!(matches!(out.errors[0].1, RaterError::EmptyLabel { .. }));
    }

    #[test]
    fn stub_rater_on_half_point_grid() {
        let r = StubRater::new(7);
        for k in 0..200 {
            let id = format!("d{k}");
            for round in [1, 2] {
                let s = r.score(&id, "", round).unwrap();
                assert!((0.0..=5.0).contains(&s));
                assert_eq!((s * 2.0).fract(), 0.0);
                assert_eq!(s, r.score(&id, "", round).unwrap());
            }
        }
    }

    #[test]
    fn stub_labeler_agreement_formula() {
        assert!((StubLabeler::new(0, 0.1).agreement_probability() - 0.82).abs() < 1e-12);
        let mut three = StubLabeler::new(0, 0.3);
        three.labels.push("other".into());
        assert!((three.agreement_probability() - (0.49 + 0.045)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn symmetric_in_rounds(pairs in prop::collection::vec((0u8..=10, 0u8..=10), 1..40), t in 1u8..8) {
            let t = t as f64 / 2.0;
            let docs: Vec<_> = (0..pairs.len()).map(|k| doc(&k.to_string())).collect();
            let fwd = Fixed(pairs.iter().enumerate().map(|(k, &(a, b))| (k.to_string(), (a as f64 / 2.0, b as f64 / 2.0))).collect());
            let rev = Fixed(pairs.iter().enumerate().map(|(k, &(a, b))| (k.to_string(), (b as f64 / 2.0, a as f64 / 2.0))).collect());
            let x = double_score_filter(docs.clone(), &fwd, t).unwrap();
            let y = double_score_filter(docs, &rev, t).unwrap();
            prop_assert_eq!(x.kept, y.kept);
            prop_assert_eq!(x.removed, y.removed);
        }

        #[test]
        fn threshold_monotone(seed in any::<u64>(), t1 in 1u8..10, dt in 0u8..6) {
            let docs: Vec<_> = (0..60).map(|k| doc(&format!("d{k}"))).collect();
            let r = StubRater::new(seed);
            let lo = double_score_filter(docs.clone(), &r, t1 as f64 / 2.0).unwrap();
            let hi = double_score_filter(docs, &r, (t1 + dt) as f64 / 2.0).unwrap();
            let hi_ids: Vec<_> = hi.kept.iter().map(|d| &d.id).collect();
            prop_assert!(lo.kept.iter().all(|d| hi_ids.contains(&&d.id)));
        }

        #[test]
        fn seeded_runs_identical(seed in any::<u64>()) {
            let docs: Vec<_> = (0..30).map(|k| doc(&format!("d{k}"))).collect();
            let a = two_round_agreement(docs.clone(), &StubLabeler::new(seed, 0.2));
            let b = two_round_agreement(docs, &StubLabeler::new(seed, 0.2));
            prop_assert_eq!(a, b);
        }
    }
}
