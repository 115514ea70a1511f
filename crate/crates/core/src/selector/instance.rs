use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::io::Record;
use crate::num::Scalar;
use crate::tokenize::{tokenize, TokenizerConfig};

use super::SelectError;

/// Complexity, quality and their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore<S> {
    pub complexity: S,
    pub quality: S,
    pub combined: S,
}

impl<S: Scalar> InstanceScore<S> {
    pub fn new(complexity: S, quality: S) -> Self {
        let combined = complexity.clone() * quality.clone();
        InstanceScore { complexity, quality, combined }
    }
}

/// A single-turn instruction/response record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl InstructionRecord {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        InstructionRecord {
            id: id.into(),
            instruction: instruction.into(),
            response: response.into(),
            complexity: None,
            quality: None,
            extra: Map::new(),
        }
    }
}

impl Record for InstructionRecord {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        for (name, v) in [("complexity", self.complexity), ("quality", self.quality)] {
            if v.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
                return Err(format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

pub trait InstanceScorer<S: Scalar>: Send + Sync {
    fn name(&self) -> String;

    fn score(&self, instruction: &str, response: &str) -> Result<InstanceScore<S>, String>;

    fn score_record(&self, record: &InstructionRecord) -> Result<InstanceScore<S>, String> {
        self.score(&record.instruction, &record.response)
    }
}

/// Stub scorer for tests and demos, not a trained model.
///
/// Complexity is the number of distinct instruction tokens divided by 10;
/// quality is looked up from the response length (see [`reference_quality`]).
#[derive(Debug, Clone, Default)]
pub struct ReferenceScorer {
    pub tokenizer: TokenizerConfig,
}

/// Quality table of [`ReferenceScorer`]: 0-4 response tokens score 1,
/// 5-19 score 2, 20-49 score 3, 50 or more score 4.
pub fn reference_quality(response_tokens: usize) -> u64 {
    match response_tokens {
        0..=4 => 1,
        5..=19 => 2,
        20..=49 => 3,
        _ => 4,
    }
}

impl<S: Scalar> InstanceScorer<S> for ReferenceScorer {
    fn name(&self) -> String {
        "reference-stub".into()
    }

    fn score(&self, instruction: &str, response: &str) -> Result<InstanceScore<S>, String> {
        let mut distinct = tokenize(instruction, &self.tokenizer);
        distinct.sort_unstable();
        distinct.dedup();
        let c = S::from_count(distinct.len() as u64) / S::from_count(10);
        let q = S::from_count(reference_quality(tokenize(response, &self.tokenizer).len()));
        Ok(InstanceScore::new(c, q))
    }
}

/// Reads precomputed `complexity` and `quality` fields from each record.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldScorer;

impl<S: Scalar> InstanceScorer<S> for FieldScorer {
    fn name(&self) -> String {
        "fields".into()
    }

    fn score(&self, _instruction: &str, _response: &str) -> Result<InstanceScore<S>, String> {
        Err("the fields scorer only scores records carrying complexity and quality".into())
    }

    fn score_record(&self, record: &InstructionRecord) -> Result<InstanceScore<S>, String> {
        let get = |name: &str, v: Option<f64>| {
            let v = v.ok_or_else(|| format!("record lacks {name}"))?;
            S::from_f64(v).ok_or_else(|| format!("{name} {v} not representable"))
        };
        Ok(InstanceScore::new(get("complexity", record.complexity)?, get("quality", record.quality)?))
    }
}

impl<S: Scalar, F> InstanceScorer<S> for F
where
    F: Fn(&str, &str) -> Result<(S, S), String> + Send + Sync,
{
    fn name(&self) -> String {
        "closure".into()
    }

    fn score(&self, instruction: &str, response: &str) -> Result<InstanceScore<S>, String> {
        self(instruction, response).map(|(c, q)| InstanceScore::new(c, q))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstruction<S> {
    pub record: InstructionRecord,
    pub score: InstanceScore<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleTurnOutcome<S> {
    pub kept: Vec<ScoredInstruction<S>>,
    pub dropped: Vec<ScoredInstruction<S>>,
    pub errors: Vec<(InstructionRecord, SelectError)>,
}

/// Keeps records with `c * q >= s_threshold`. Input order is preserved in
/// every output; scorer failures go to `errors`.
pub fn select_single_turn<S, I>(records: Vec<InstructionRecord>, scorer: &I, s_threshold: &S) -> SingleTurnOutcome<S>
where
    S: Scalar,
    I: InstanceScorer<S> + ?Sized,
{
    let scored: Vec<_> = records
        .into_par_iter()
        .map(|record| {
            let res = scorer.score_record(&record);
            (record, res)
        })
        .collect();
    let mut out = SingleTurnOutcome { kept: Vec::new(), dropped: Vec::new(), errors: Vec::new() };
    for (record, res) in scored {
        match res {
            Ok(score) => {
                let keep = score.combined >= *s_threshold;
                let item = ScoredInstruction { record, score };
                if keep {
                    out.kept.push(item);
                } else {
                    out.dropped.push(item);
                }
            }
            Err(message) => {
                let err = SelectError::Instance { id: record.id.clone(), message };
                out.errors.push((record, err));
            }
        }
    }
    out
}
