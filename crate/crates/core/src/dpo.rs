//! Preference-pair construction for DPO.
//!
//! Objective pairs come from questions with a known answer: the correct
//! option is chosen and one wrong option, drawn uniformly, is rejected.
//! Subjective pairs compare an original response with a generated one under
//! a four-dimension judge; the higher mean wins and ties keep the original.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::io::{IngestError, Record};
use crate::protocol::LineClient;
use crate::scoring::ScoreError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error("{id}: needs at least two options")]
    TooFewOptions { id: String },
    #[error("{id}: answer '{answer}' is not one of the options")]
    AnswerNotInOptions { id: String, answer: String },
    #[error("{id}: every wrong option has the same text as the answer")]
    NoDistinctWrongOption { id: String },
    #[error("{id}: {what} response is empty")]
    EmptyResponse { id: String, what: &'static str },
    #[error("{id}: original and generated responses are identical")]
    IdenticalResponses { id: String },
    #[error("{id}: judge: {message}")]
    Judge { id: String, message: String },
}

impl DpoError {
    pub fn record_id(&self) -> &str {
        match self {
            DpoError::TooFewOptions { id }
            | DpoError::AnswerNotInOptions { id, .. }
            | DpoError::NoDistinctWrongOption { id }
            | DpoError::EmptyResponse { id, .. }
            | DpoError::IdenticalResponses { id }
            | DpoError::Judge { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Subjective,
    Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub fluency: f64,
    pub relevance: f64,
    pub completeness: f64,
    pub proficiency: f64,
}

impl DimensionScores {
    pub fn mean(&self) -> f64 {
        (self.fluency + self.relevance + self.completeness + self.proficiency) / 4.0
    }

    fn is_finite(&self) -> bool {
        [self.fluency, self.relevance, self.completeness, self.proficiency].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Original,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub judge: String,
    pub original: DimensionScores,
    pub generated: DimensionScores,
    pub original_mean: f64,
    pub generated_mean: f64,
    pub winner: Winner,
    pub aggregation: String,
    pub tie_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub kind: PairKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_record: Option<JudgeRecord>,
}

impl Record for PreferencePair {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn check(&self) -> Result<(), String> {
        if self.chosen == self.rejected {
            return Err("chosen equals rejected".into());
        }
        match (self.kind, &self.judge_record) {
            (PairKind::Objective, Some(_)) => Err("objective pair carries a judge record".into()),
            (PairKind::Subjective, None) => Err("subjective pair lacks a judge record".into()),
            _ => Ok(()),
        }
    }
}

/// A question with lettered options and a known answer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveQuestion {
    pub id: String,
    pub prompt: String,
    pub options: BTreeMap<String, String>,
    /// Key into `options`.
    pub answer: String,
}

impl Record for ObjectiveQuestion {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl ObjectiveQuestion {
    /// The prompt followed by one `KEY. text` line per option.
    pub fn render(&self) -> String {
        let mut out = self.prompt.clone();
        for (k, v) in &self.options {
            out.push('\n');
            out.push_str(k);
            out.push_str(". ");
            out.push_str(v);
        }
        out
    }
}

/// Chosen is the answer text; rejected is a uniform draw among wrong options,
/// seeded per question id.
pub fn build_objective_pair(q: &ObjectiveQuestion, seed: u64) -> Result<PreferencePair, DpoError> {
    if q.options.len() < 2 {
        return Err(DpoError::TooFewOptions { id: q.id.clone() });
    }
    let chosen = q
        .options
        .get(&q.answer)
        .ok_or_else(|| DpoError::AnswerNotInOptions { id: q.id.clone(), answer: q.answer.clone() })?;
    let wrong: Vec<&String> =
        q.options.iter().filter(|(k, v)| **k != q.answer && *v != chosen).map(|(_, v)| v).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &q.id));
    let rejected = wrong.choose(&mut rng).ok_or_else(|| DpoError::NoDistinctWrongOption { id: q.id.clone() })?;
    Ok(PreferencePair {
        id: q.id.clone(),
        prompt: q.render(),
        chosen: chosen.clone(),
        rejected: (*rejected).clone(),
        kind: PairKind::Objective,
        judge_record: None,
    })
}

pub trait Judge: Send + Sync {
    fn identity(&self) -> String;

    fn score(&self, id: &str, prompt: &str, response: &str) -> Result<DimensionScores, String>;
}

/// Seeded stand-in judge: integer scores 1-5 per dimension, derived from a
/// hash of the seed, the prompt id and the response text.
#[derive(Debug, Clone, Copy)]
pub struct StubJudge {
    pub seed: u64,
}

impl Judge for StubJudge {
    fn identity(&self) -> String {
        format!("stub-judge:seed={}", self.seed)
    }

    fn score(&self, id: &str, _prompt: &str, response: &str) -> Result<DimensionScores, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{id}\u{1f}{response}")));
        let mut d = || rng.gen_range(1..=5u32) as f64;
        Ok(DimensionScores { fluency: d(), relevance: d(), completeness: d(), proficiency: d() })
    }
}

/// Judge over the line protocol: `{"id","prompt","text"}` -> `{"id","scores":{...}}`.
pub struct ExternalJudge {
    client: LineClient,
}

impl ExternalJudge {
    pub fn new(client: LineClient) -> Self {
        ExternalJudge { client }
    }

    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ScoreError> {
        Ok(Self::new(LineClient::connect(endpoint, timeout)?))
    }
}

impl Judge for ExternalJudge {
    fn identity(&self) -> String {
        self.client.model().to_string()
    }

    fn score(&self, _id: &str, prompt: &str, response: &str) -> Result<DimensionScores, String> {
        let req = json!({"id": self.client.fresh_id("j"), "prompt": prompt, "text": response});
        let v = self.client.call(req).map_err(|e| e.to_string())?;
        let scores = v.get("scores").cloned().unwrap_or(Value::Null);
        serde_json::from_value(scores).map_err(|e| format!("bad scores object: {e}"))
    }
}

/// One prompt with its original and generated responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveItem {
    pub id: String,
    pub prompt: String,
    pub original_response: String,
    pub generated_response: String,
}

impl Record for SubjectiveItem {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }
}

pub fn build_subjective_pair<J: Judge + ?Sized>(item: &SubjectiveItem, judge: &J) -> Result<PreferencePair, DpoError> {
    let id = &item.id;
    for (what, text) in [("original", &item.original_response), ("generated", &item.generated_response)] {
        if text.trim().is_empty() {
            return Err(DpoError::EmptyResponse { id: id.clone(), what });
        }
    }
    if item.original_response == item.generated_response {
        return Err(DpoError::IdenticalResponses { id: id.clone() });
    }
    let judged = |text: &str| {
        judge
            .score(id, &item.prompt, text)
            .and_then(|s| if s.is_finite() { Ok(s) } else { Err("non-finite dimension score".into()) })
            .map_err(|message| DpoError::Judge { id: id.clone(), message })
    };
    let original = judged(&item.original_response)?;
    let generated = judged(&item.generated_response)?;
    let (om, gm) = (original.mean(), generated.mean());
    let winner = if gm > om { Winner::Generated } else { Winner::Original };
    let (chosen, rejected) = match winner {
        Winner::Generated => (&item.generated_response, &item.original_response),
        Winner::Original => (&item.original_response, &item.generated_response),
    };
    Ok(PreferencePair {
        id: id.clone(),
        prompt: item.prompt.clone(),
        chosen: chosen.clone(),
        rejected: rejected.clone(),
        kind: PairKind::Subjective,
        judge_record: Some(JudgeRecord {
            judge: judge.identity(),
            original,
            generated,
            original_mean: om,
            generated_mean: gm,
            winner,
            aggregation: "unweighted mean of fluency, relevance, completeness, proficiency".into(),
            tie_rule: "original wins ties".into(),
        }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Built<T> {
    pub pairs: Vec<PreferencePair>,
    pub errors: Vec<(T, DpoError)>,
}

pub fn build_objective_pairs(questions: Vec<ObjectiveQuestion>, seed: u64) -> Built<ObjectiveQuestion> {
    let mut out = Built { pairs: Vec::new(), errors: Vec::new() };
    for q in questions {
        match build_objective_pair(&q, seed) {
            Ok(p) => out.pairs.push(p),
            Err(e) => out.errors.push((q, e)),
        }
    }
    out
}

/// Judges items in parallel; output keeps input order.
pub fn build_subjective_pairs<J: Judge + ?Sized>(items: Vec<SubjectiveItem>, judge: &J) -> Built<SubjectiveItem> {
    let results: Vec<_> = items
        .into_par_iter()
        .map(|item| {
            let r = build_subjective_pair(&item, judge);
            (item, r)
        })
        .collect();
    let mut out = Built { pairs: Vec::new(), errors: Vec::new() };
    for (item, r) in results {
        match r {
            Ok(p) => out.pairs.push(p),
            Err(e) => out.errors.push((item, e)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DpoCounts {
    pub subjective: u64,
    pub objective: u64,
    pub total: u64,
}

impl DpoCounts {
    pub fn of(pairs: &[PreferencePair]) -> Self {
        let subjective = pairs.iter().filter(|p| p.kind == PairKind::Subjective).count() as u64;
        let objective = pairs.len() as u64 - subjective;
        DpoCounts { subjective, objective, total: subjective + objective }
    }

    /// Counts pairs by kind straight from a pair file, reading only the `kind` field.
    pub fn scan(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let body =
            std::fs::read_to_string(path).map_err(|source| IngestError::Open { path: path.to_path_buf(), source })?;
        let mut c = DpoCounts::default();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)?;
            match v.get("kind").and_then(Value::as_str) {
                Some("subjective") => c.subjective += 1,
                Some("objective") => c.objective += 1,
                _ => {}
            }
            c.total += 1;
        }
        Ok(c)
    }
}

/// Concatenates both streams, shuffles with the seed and counts by kind.
pub fn build_dataset(
    subjective: Vec<PreferencePair>,
    objective: Vec<PreferencePair>,
    seed: u64,
) -> (Vec<PreferencePair>, DpoCounts) {
    let mut all = subjective;
    all.extend(objective);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dpo-shuffle"));
    all.shuffle(&mut rng);
    let counts = DpoCounts::of(&all);
    (all, counts)
}
