//! SFT data selection.
//!
//! Single-turn records are ranked by `s = c * q`, the product of an
//! instruction complexity score and a response quality score. Multi-turn
//! dialogues additionally go through ConFilter: for each assistant reply the
//! ratio between its per-token loss given the earlier rounds and its loss
//! with no context at all.

mod confilter;
mod instance;

pub use confilter::{
    conditioned_score, confilter_cf, direct_score, render_history, select_multi_turn, ConFilterScore, Decision,
    DialogueReport, DropReason, MultiTurnOutcome, ScoreAverage, SelectionConfig, TurnReport,
};
pub use instance::{
    reference_quality, select_single_turn, FieldScorer, InstanceScore, InstanceScorer, InstructionRecord,
    ReferenceScorer, ScoredInstruction, SingleTurnOutcome,
};

use thiserror::Error;

use crate::scoring::ScoreError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("{id}: round {round} has no assistant reply")]
    NoAssistant { id: String, round: usize },
    #[error("{id}: round {round} out of range (dialogue has {rounds})")]
    RoundOutOfRange { id: String, round: usize, rounds: usize },
    #[error("{id}: round {round} has zero direct loss, cf undefined")]
    DegenerateTurn { id: String, round: usize },
    #[error("{id}: scoring round {round}: {source}")]
    Score { id: String, round: usize, source: ScoreError },
    #[error("{id}: instance scorer: {message}")]
    Instance { id: String, message: String },
    #[error("invalid selection config: {0}")]
    Config(String),
}

impl SelectError {
    pub fn record_id(&self) -> Option<&str> {
        match self {
            SelectError::NoAssistant { id, .. }
            | SelectError::RoundOutOfRange { id, .. }
            | SelectError::DegenerateTurn { id, .. }
            | SelectError::Score { id, .. }
            | SelectError::Instance { id, .. } => Some(id),
            SelectError::Config(_) => None,
        }
    }
}
