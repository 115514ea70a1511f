use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Dialogue, Round};
use crate::num::Real;
use crate::scoring::{ScoreError, Scorer, TokenLogProbs};

use super::instance::InstanceScorer;
use super::SelectError;

/// Per-token losses of one assistant reply and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConFilterScore<R> {
    /// Mean negative log-likelihood given the earlier rounds.
    pub conditioned: R,
    /// Mean negative log-likelihood with an empty context.
    pub direct: R,
    /// `conditioned / direct`.
    pub cf: R,
}

impl<R: Real> ConFilterScore<R> {
    pub fn from_losses(conditioned: R, direct: R) -> Option<Self> {
        (direct > R::zero()).then(|| ConFilterScore { conditioned, direct, cf: conditioned / direct })
    }
}

/// Which rounds contribute to the averaged instance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreAverage {
    /// Rounds with an assistant reply.
    #[default]
    AssistantTurns,
    /// Every round; a trailing unanswered prompt is scored with an empty response.
    AllRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub s_threshold: f64,
    pub cf_low: f64,
    pub cf_high: f64,
    pub average: ScoreAverage,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { s_threshold: 0.0, cf_low: 0.3, cf_high: 1.0, average: ScoreAverage::AssistantTurns }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if !(self.cf_low > 0.0 && self.cf_low < self.cf_high) {
            return Err(SelectError::Config(format!(
                "need 0 < cf_low < cf_high, got [{}, {}]",
                self.cf_low, self.cf_high
            )));
        }
        if !self.s_threshold.is_finite() {
            return Err(SelectError::Config("s_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Renders rounds `1..round` as conditioning text: one `role: text` line per turn.
pub fn render_history(dialogue: &Dialogue, round: usize) -> String {
    let mut out = String::new();
    for r in dialogue.rounds().take(round.saturating_sub(1)) {
        push_turn(&mut out, "user", &r.user.text);
        if let Some(a) = r.assistant {
            push_turn(&mut out, "assistant", &a.text);
        }
    }
    out
}

fn push_turn(out: &mut String, role: &str, text: &str) {
    out.push_str(role);
    out.push_str(": ");
    out.push_str(text);
    out.push('\n');
}

fn reply(dialogue: &Dialogue, round: usize) -> Result<&str, SelectError> {
    let r = dialogue.round(round).ok_or_else(|| SelectError::RoundOutOfRange {
        id: dialogue.id.clone(),
        round,
        rounds: dialogue.num_rounds(),
    })?;
    r.assistant.map(|a| a.text.as_str()).ok_or_else(|| SelectError::NoAssistant { id: dialogue.id.clone(), round })
}

fn mean_loss<R: Real>(d: &Dialogue, round: usize, res: Result<TokenLogProbs<R>, ScoreError>) -> Result<R, SelectError> {
    let lp = res.map_err(|source| SelectError::Score { id: d.id.clone(), round, source })?;
    lp.mean_nll().ok_or_else(|| SelectError::Score { id: d.id.clone(), round, source: ScoreError::EmptyContinuation })
}

/// Mean per-token loss of the assistant reply in `round` (1-based) given the
/// rendered earlier rounds.
pub fn conditioned_score<R: Real, S: Scorer<R> + ?Sized>(
    dialogue: &Dialogue,
    round: usize,
    scorer: &S,
) -> Result<R, SelectError> {
    let text = reply(dialogue, round)?;
    mean_loss(dialogue, round, scorer.sequence_logprobs(&render_history(dialogue, round), text))
}

/// Mean per-token loss of the assistant reply in `round` with no context.
pub fn direct_score<R: Real, S: Scorer<R> + ?Sized>(
    dialogue: &Dialogue,
    round: usize,
    scorer: &S,
) -> Result<R, SelectError> {
    let text = reply(dialogue, round)?;
    mean_loss(dialogue, round, scorer.sequence_logprobs("", text))
}

pub fn confilter_cf<R: Real, S: Scorer<R> + ?Sized>(
    dialogue: &Dialogue,
    round: usize,
    scorer: &S,
) -> Result<ConFilterScore<R>, SelectError> {
    let conditioned = conditioned_score(dialogue, round, scorer)?;
    let direct = direct_score(dialogue, round, scorer)?;
    ConFilterScore::from_losses(conditioned, direct)
        .ok_or_else(|| SelectError::DegenerateTurn { id: dialogue.id.clone(), round })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    TooLowCorrelation,
    Redundancy,
    LowQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    /// Round number.
    pub i: usize,
    /// Position of the assistant turn in the dialogue.
    pub turn_index: usize,
    pub conditioned: f64,
    pub direct: f64,
    pub cf: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueReport {
    pub id: String,
    pub per_turn: Vec<TurnReport>,
    pub final_score: Option<f64>,
    pub decision: Decision,
    pub reason: Option<DropReason>,
    /// Round at which the cf window was violated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violating_turn: Option<usize>,
    pub scorer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTurnOutcome {
    /// Kept dialogues, with per-turn and final scores filled in.
    pub kept: Vec<Dialogue>,
    pub dropped: Vec<Dialogue>,
    /// One report per scored dialogue, in input order.
    pub reports: Vec<DialogueReport>,
    pub errors: Vec<(Dialogue, SelectError)>,
}

struct Scored {
    turns: Vec<TurnReport>,
    s_values: Vec<f64>,
}

fn score_dialogue<R, S, I>(d: &Dialogue, scorer: &S, instance: &I, average: ScoreAverage) -> Result<Scored, SelectError>
where
    R: Real,
    S: Scorer<R> + ?Sized,
    I: InstanceScorer<R> + ?Sized,
{
    let answered: Vec<Round<'_>> = d.rounds().filter(|r| r.assistant.is_some()).collect();
    let mut requests = Vec::with_capacity(answered.len() * 2);
    for r in &answered {
        let text = &r.assistant.expect("answered round").text;
        requests.push((render_history(d, r.index), text.clone()));
        requests.push((String::new(), text.clone()));
    }
    let mut results = scorer.sequence_logprobs_batch(&requests).into_iter();
    let mut turns = Vec::with_capacity(answered.len());
    let mut s_values = Vec::new();
    for r in &answered {
        let assistant = r.assistant.expect("answered round");
        let conditioned = mean_loss(d, r.index, results.next().expect("one result per request"))?;
        let direct = mean_loss(d, r.index, results.next().expect("one result per request"))?;
        let cf = ConFilterScore::from_losses(conditioned, direct)
            .ok_or_else(|| SelectError::DegenerateTurn { id: d.id.clone(), round: r.index })?;
        let s = instance
            .score(&r.user.text, &assistant.text)
            .map_err(|message| SelectError::Instance { id: d.id.clone(), message })?
            .combined
            .to_f64_lossy();
        s_values.push(s);
        turns.push(TurnReport {
            i: r.index,
            turn_index: assistant.turn_index,
            conditioned: conditioned.to_f64_lossy(),
            direct: direct.to_f64_lossy(),
            cf: cf.cf.to_f64_lossy(),
            s,
        });
    }
    if average == ScoreAverage::AllRounds {
        for r in d.rounds().filter(|r| r.assistant.is_none()) {
            let s = instance
                .score(&r.user.text, "")
                .map_err(|message| SelectError::Instance { id: d.id.clone(), message })?;
            s_values.push(s.combined.to_f64_lossy());
        }
    }
    Ok(Scored { turns, s_values })
}

fn decide(scored: &Scored, cfg: &SelectionConfig) -> (Decision, Option<DropReason>, Option<usize>, Option<f64>) {
    let final_score = crate::num::mean(&scored.s_values);
    for t in &scored.turns {
        if t.cf > cfg.cf_high {
            return (Decision::Drop, Some(DropReason::TooLowCorrelation), Some(t.i), final_score);
        }
        if t.cf < cfg.cf_low {
            return (Decision::Drop, Some(DropReason::Redundancy), Some(t.i), final_score);
        }
    }
    match final_score {
        Some(s) if s >= cfg.s_threshold => (Decision::Keep, None, None, final_score),
        _ => (Decision::Drop, Some(DropReason::LowQuality), None, final_score),
    }
}

/// Keeps a dialogue iff every answered round has `cf` in `[cf_low, cf_high]`
/// and the mean instance score reaches `s_threshold`. Dialogues are scored in
/// parallel; outputs keep input order.
pub fn select_multi_turn<R, S, I>(
    dialogues: Vec<Dialogue>,
    scorer: &S,
    instance: &I,
    cfg: &SelectionConfig,
) -> Result<MultiTurnOutcome, SelectError>
where
    R: Real,
    S: Scorer<R> + ?Sized,
    I: InstanceScorer<R> + ?Sized,
{
    cfg.validate()?;
    let identity = scorer.backend().identity;
    let scored: Vec<_> = dialogues
        .into_par_iter()
        .map(|d| {
            let res = score_dialogue(&d, scorer, instance, cfg.average);
            (d, res)
        })
        .collect();
    let mut out = MultiTurnOutcome { kept: Vec::new(), dropped: Vec::new(), reports: Vec::new(), errors: Vec::new() };
    for (mut d, res) in scored {
        let scored = match res {
            Ok(s) => s,
            Err(e) => {
                out.errors.push((d, e));
                continue;
            }
        };
        let (decision, reason, violating_turn, final_score) = decide(&scored, cfg);
        out.reports.push(DialogueReport {
            id: d.id.clone(),
            per_turn: scored.turns,
            final_score,
            decision,
            reason,
            violating_turn,
            scorer: identity.clone(),
        });
        if !scored.s_values.is_empty() {
            d.set_scores(scored.s_values);
        }
        match decision {
            Decision::Keep => out.kept.push(d),
            Decision::Drop => out.dropped.push(d),
        }
    }
    Ok(out)
}
