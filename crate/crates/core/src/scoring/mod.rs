//! Per-token log-probability backends.
//!
//! All backends return natural-log probabilities, one per continuation token,
//! each conditioned on the full context plus the preceding continuation tokens.

mod external;
mod ngram;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::tokenize::{tokenize, TokenizerConfig};

pub use external::ExternalScorer;
pub use ngram::{NgramLM, BOS, UNK};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScoreError {
    #[error("cannot build a language model from an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1 (got {0})")]
    InvalidOrder(usize),
    #[error("add-k constant must be positive")]
    InvalidAddK,
    #[error("continuation has no tokens")]
    EmptyContinuation,
    #[error("request {request_id} timed out")]
    Timeout { request_id: String },
    #[error("protocol violation{}: {message}", fmt_id(.request_id))]
    Protocol { request_id: Option<String>, message: String },
    #[error("backend error for request {request_id}: {message}")]
    Remote { request_id: String, message: String },
    #[error("transport failure: {0}")]
    Transport(String),
}

fn fmt_id(id: &Option<String>) -> String {
    id.as_ref().map(|i| format!(" (request {i})")).unwrap_or_default()
}

impl ScoreError {
    /// Failures of an external backend that may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ScoreError::Timeout { .. }
                | ScoreError::Protocol { .. }
                | ScoreError::Remote { .. }
                | ScoreError::Transport(_)
        )
    }

    pub fn request_id(&self) -> Option<&str> {
        match self {
            ScoreError::Timeout { request_id } | ScoreError::Remote { request_id, .. } => Some(request_id),
            ScoreError::Protocol { request_id, .. } => request_id.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Ngram,
    Uniform,
    External,
}

/// Which model produced a score. Recorded into every score report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerBackend {
    pub kind: BackendKind,
    pub identity: String,
}

impl fmt::Display for ScorerBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs<R> {
    pub tokens: Vec<String>,
    pub logprobs: Vec<R>,
}

impl<R: Real> TokenLogProbs<R> {
    /// Checks the shape law and that every value is a finite non-positive log-probability.
    pub fn new(tokens: Vec<String>, logprobs: Vec<R>) -> Result<Self, String> {
        if tokens.len() != logprobs.len() {
            return Err(format!("{} tokens but {} logprobs", tokens.len(), logprobs.len()));
        }
        if let Some(bad) = logprobs.iter().find(|lp| !(lp.is_finite() && **lp <= R::zero())) {
            return Err(format!("invalid log-probability {bad:?}"));
        }
        Ok(TokenLogProbs { tokens, logprobs })
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn total(&self) -> R {
        self.logprobs.iter().fold(R::zero(), |acc, &v| acc + v)
    }

    /// Mean negative log-likelihood per token; `None` when empty.
    pub fn mean_nll(&self) -> Option<R> {
        if self.is_empty() {
            return None;
        }
        Some(-self.total() / R::from_count(self.len() as u64))
    }
}

pub trait Scorer<R: Real>: Send + Sync {
    fn backend(&self) -> ScorerBackend;

    fn sequence_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError>;

    /// Scores several requests. Remote backends override this to pipeline.
    fn sequence_logprobs_batch(&self, requests: &[(String, String)]) -> Vec<Result<TokenLogProbs<R>, ScoreError>> {
        requests.iter().map(|(c, s)| self.sequence_logprobs(c, s)).collect()
    }
}

/// Context-free backend assigning `1/|V|` to every token.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    pub vocab_size: usize,
    pub tokenizer: TokenizerConfig,
}

impl UniformScorer {
    pub fn new(vocab_size: usize, tokenizer: TokenizerConfig) -> Self {
        assert!(vocab_size >= 1, "uniform scorer needs a non-empty vocabulary");
        UniformScorer { vocab_size, tokenizer }
    }
}

impl<R: Real> Scorer<R> for UniformScorer {
    fn backend(&self) -> ScorerBackend {
        ScorerBackend { kind: BackendKind::Uniform, identity: format!("uniform:v={}", self.vocab_size) }
    }

    fn sequence_logprobs(&self, _context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError> {
        let tokens = tokenize(continuation, &self.tokenizer);
        if tokens.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        let lp = -R::from_count(self.vocab_size as u64).ln();
        let logprobs = vec![lp; tokens.len()];
        Ok(TokenLogProbs { tokens, logprobs })
    }
}

impl<R: Real, T: Scorer<R> + ?Sized> Scorer<R> for &T {
    fn backend(&self) -> ScorerBackend {
        (**self).backend()
    }

    fn sequence_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError> {
        (**self).sequence_logprobs(context, continuation)
    }

    fn sequence_logprobs_batch(&self, requests: &[(String, String)]) -> Vec<Result<TokenLogProbs<R>, ScoreError>> {
        (**self).sequence_logprobs_batch(requests)
    }
}

impl<R: Real, T: Scorer<R> + ?Sized> Scorer<R> for Box<T> {
    fn backend(&self) -> ScorerBackend {
        (**self).backend()
    }

    fn sequence_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError> {
        (**self).sequence_logprobs(context, continuation)
    }

    fn sequence_logprobs_batch(&self, requests: &[(String, String)]) -> Vec<Result<TokenLogProbs<R>, ScoreError>> {
        (**self).sequence_logprobs_batch(requests)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_backend() {
        let u = UniformScorer::new(50, TokenizerConfig::default());
        let out: TokenLogProbs<f64> = u.sequence_logprobs("anything", "three token continuation").unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.logprobs.iter().all(|&v| v == -(50f64).ln()));
        assert_eq!(out.mean_nll(), Some((50f64).ln()));
        assert_eq!(Scorer::<f64>::sequence_logprobs(&u, "", "  ,. "), Err(ScoreError::EmptyContinuation));
    }

    #[test]
    fn shape_law_checked() {
        assert!(TokenLogProbs::<f64>::new(vec!["a".into()], vec![]).is_err());
        assert!(TokenLogProbs::<f64>::new(vec!["a".into()], vec![0.5]).is_err());
        assert!(TokenLogProbs::<f64>::new(vec!["a".into()], vec![f64::NAN]).is_err());
        assert!(TokenLogProbs::<f64>::new(vec!["a".into()], vec![-0.5]).is_ok());
    }

    #[test]
    fn retriable_errors() {
        assert!(ScoreError::Timeout { request_id: "r1".into() }.is_retriable());
        assert!(!ScoreError::EmptyContinuation.is_retriable());
        assert_eq!(ScoreError::Timeout { request_id: "r1".into() }.request_id(), Some("r1"));
    }
}
