//! Shared record types: pretraining documents and multi-turn dialogues.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tokenize::{count_tokens, TokenizerConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("record id must be non-empty")]
    EmptyId,
    #[error("quality_score {0} outside [0, 5]")]
    QualityOutOfRange(f64),
    #[error("dialogue has no turns")]
    NoTurns,
    #[error("turn {index} has empty text")]
    EmptyTurn { index: usize },
    #[error("turn {index} should be {expected} but is {found}")]
    RoleOrder { index: usize, expected: Role, found: Role },
    #[error("final_score {final_score} is not the mean of per_turn_scores ({mean})")]
    FinalScoreMismatch { final_score: f64, mean: f64 },
    #[error("unknown {kind} '{value}'")]
    UnknownVariant { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
    Other,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Zh => "zh",
            Language::En => "en",
            Language::Other => "other",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zh" => Ok(Language::Zh),
            "en" => Ok(Language::En),
            "other" => Ok(Language::Other),
            _ => Err(ModelError::UnknownVariant { kind: "language", value: s.to_string() }),
        }
    }
}

/// Coarse domain. Finer labels travel in [`Document::domain_label`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Medical,
    General,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Medical => "medical",
            Domain::General => "general",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "medical" => Ok(Domain::Medical),
            "general" => Ok(Domain::General),
            _ => Err(ModelError::UnknownVariant { kind: "domain", value: s.to_string() }),
        }
    }
}

/// Where a mixed document came from; written by the mixer, required by verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub bucket: String,
    /// File name of the source dataset.
    pub manifest: String,
    /// Id of the record in the source dataset.
    pub origin_id: String,
    /// 1 for the first sampling pass, 2+ for repeats.
    pub pass: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
    pub token_count: u64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// Fields this crate does not interpret; preserved on passthrough.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        language: Language,
        domain: Domain,
        source: impl Into<String>,
        tokenizer: &TokenizerConfig,
    ) -> Self {
        let text = text.into();
        let token_count = count_tokens(&text, tokenizer) as u64;
        Document {
            id: id.into(),
            text,
            language,
            domain,
            domain_label: None,
            token_count,
            source: source.into(),
            quality_score: None,
            provenance: None,
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        if let Some(q) = self.quality_score {
            if !(0.0..=5.0).contains(&q) {
                return Err(ModelError::QualityOutOfRange(q));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueTurn {
    pub role: Role,
    pub text: String,
    /// 1-based position in the dialogue.
    pub turn_index: usize,
}

/// One user/assistant exchange. The final round may lack an assistant reply.
#[derive(Debug, Clone, Copy)]
pub struct Round<'a> {
    /// 1-based round number.
    pub index: usize,
    pub user: &'a DialogueTurn,
    pub assistant: Option<&'a DialogueTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawTurn {
    role: Role,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_turn_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_score: Option<f64>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// A multi-turn conversation. Role alternation (user first) is enforced at
/// construction and deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDialogue", into = "RawDialogue")]
pub struct Dialogue {
    pub id: String,
    turns: Vec<DialogueTurn>,
    per_turn_scores: Option<Vec<f64>>,
    final_score: Option<f64>,
    pub extra: Map<String, Value>,
}

impl Dialogue {
    pub fn new<S: Into<String>>(
        id: impl Into<String>,
        turns: impl IntoIterator<Item = (Role, S)>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        let mut out = Vec::new();
        for (k, (role, text)) in turns.into_iter().enumerate() {
            let index = k + 1;
            let text = text.into();
            let expected = if k % 2 == 0 { Role::User } else { Role::Assistant };
            if role != expected {
                return Err(ModelError::RoleOrder { index, expected, found: role });
            }
            if text.is_empty() {
                return Err(ModelError::EmptyTurn { index });
            }
            out.push(DialogueTurn { role, text, turn_index: index });
        }
        if out.is_empty() {
            return Err(ModelError::NoTurns);
        }
        Ok(Dialogue { id, turns: out, per_turn_scores: None, final_score: None, extra: Map::new() })
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    /// Turn by 1-based index.
    pub fn turn(&self, index: usize) -> Option<&DialogueTurn> {
        index.checked_sub(1).and_then(|k| self.turns.get(k))
    }

    pub fn rounds(&self) -> impl Iterator<Item = Round<'_>> + '_ {
        self.turns.chunks(2).enumerate().map(|(k, pair)| Round { index: k + 1, user: &pair[0], assistant: pair.get(1) })
    }

    pub fn round(&self, index: usize) -> Option<Round<'_>> {
        self.rounds().nth(index.checked_sub(1)?)
    }

    pub fn num_rounds(&self) -> usize {
        self.turns.len().div_ceil(2)
    }

    pub fn per_turn_scores(&self) -> Option<&[f64]> {
        self.per_turn_scores.as_deref()
    }

    pub fn final_score(&self) -> Option<f64> {
        self.final_score
    }

    /// Stores per-turn scores and sets the final score to their mean.
    pub fn set_scores(&mut self, per_turn: Vec<f64>) {
        self.final_score = crate::num::mean(&per_turn);
        self.per_turn_scores = Some(per_turn);
    }

    pub fn clear_scores(&mut self) {
        self.per_turn_scores = None;
        self.final_score = None;
    }
}

impl TryFrom<RawDialogue> for Dialogue {
    type Error = ModelError;

    fn try_from(raw: RawDialogue) -> Result<Self, Self::Error> {
        let mut d = Dialogue::new(raw.id, raw.turns.into_iter().map(|t| (t.role, t.text)))?;
        if let (Some(per), Some(fin)) = (&raw.per_turn_scores, raw.final_score) {
            let mean = crate::num::mean(per).unwrap_or(f64::NAN);
            if (mean - fin).abs() > 1e-9 * mean.abs().max(1.0) {
                return Err(ModelError::FinalScoreMismatch { final_score: fin, mean });
            }
        }
        d.per_turn_scores = raw.per_turn_scores;
        d.final_score = raw.final_score;
        d.extra = raw.extra;
        Ok(d)
    }
}

impl From<Dialogue> for RawDialogue {
    fn from(d: Dialogue) -> Self {
        RawDialogue {
            id: d.id,
            turns: d.turns.into_iter().map(|t| RawTurn { role: t.role, text: t.text }).collect(),
            per_turn_scores: d.per_turn_scores,
            final_score: d.final_score,
            extra: d.extra,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation_enforced() {
        let err = Dialogue::new("d", [(Role::Assistant, "hi")]).unwrap_err();
        assert_eq!(err, ModelError::RoleOrder { index: 1, expected: Role::User, found: Role::Assistant });
        let err = Dialogue::new("d", [(Role::User, "a"), (Role::User, "b")]).unwrap_err();
        assert!(matches!(err, ModelError::RoleOrder { index: 2, .. }));
        assert_eq!(Dialogue::new("d", Vec::<(Role, String)>::new()).unwrap_err(), ModelError::NoTurns);
        assert_eq!(Dialogue::new("d", [(Role::User, "")]).unwrap_err(), ModelError::EmptyTurn { index: 1 });
    }

    #[test]
    fn deserialization_validates() {
        let bad = r#"{"id":"x","turns":[{"role":"assistant","text":"hi"}]}"#;
        assert!(serde_json::from_str::<Dialogue>(bad).is_err());
        let mismatch =
            r#"{"id":"x","turns":[{"role":"user","text":"hi"}],"per_turn_scores":[1.0,3.0],"final_score":1.0}"#;
        assert!(serde_json::from_str::<Dialogue>(mismatch).is_err());
        let ok = r#"{"id":"x","turns":[{"role":"user","text":"q"},{"role":"assistant","text":"a"}],"tag":7}"#;
        let d: Dialogue = serde_json::from_str(ok).unwrap();
        assert_eq!(d.turn(2).unwrap().turn_index, 2);
        assert_eq!(d.extra["tag"], 7);
        assert_eq!(serde_json::to_string(&d).unwrap(), ok);
    }

    #[test]
    fn rounds_pair_turns() {
        let d = Dialogue::new("d", [(Role::User, "q1"), (Role::Assistant, "a1"), (Role::User, "q2")]).unwrap();
        let rounds: Vec<_> = d.rounds().collect();
        assert_eq!(rounds.len(), 2);
        assert_eq!(rounds[0].assistant.unwrap().text, "a1");
        assert!(rounds[1].assistant.is_none());
        assert_eq!(d.round(2).unwrap().user.turn_index, 3);
    }

    #[test]
    fn final_score_is_mean() {
        let mut d = Dialogue::new("d", [(Role::User, "q")]).unwrap();
        d.set_scores(vec![1.0, 2.0, 6.0]);
        assert_eq!(d.final_score(), Some(3.0));
    }

    #[test]
    fn document_validation() {
        let mut doc =
            Document::new("a", "hello world", Language::En, Domain::General, "s", &TokenizerConfig::default());
        assert_eq!(doc.token_count, 2);
        assert!(doc.validate().is_ok());
        doc.quality_score = Some(5.5);
        assert_eq!(doc.validate(), Err(ModelError::QualityOutOfRange(5.5)));
        doc.quality_score = None;
        doc.id.clear();
        assert_eq!(doc.validate(), Err(ModelError::EmptyId));
    }
}
