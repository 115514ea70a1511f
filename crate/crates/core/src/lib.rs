//! Corpus curation toolkit for building domain LLM training sets.
//!
//! The crate is organised as a set of file-composable stages:
//!
//! - [`rules`]: rule-based document cleaning (length, special characters, toxicity, PII)
//! - [`dedup`]: exact and MinHash/LSH near-duplicate removal
//! - [`scoring`]: per-token log-probability backends (reference n-gram LM, uniform, external)
//! - [`selector`]: complexity x quality selection and the ConFilter dialogue filter
//! - [`rater`]: double-scoring and two-round label agreement around pluggable raters
//! - [`mixer`]: two-stage continual-pretraining mixtures at token-level ratios
//! - [`dpo`]: subjective and objective preference-pair construction
//! - [`pipeline`]: config files, run manifests and the stage dispatcher used by the CLI
//!
//! Numeric code in [`scoring`] and [`selector`] is generic over the scalar type
//! (see [`num`]); the aliases below fix the common instantiations.

pub mod dedup;
pub mod dpo;
mod hashing;
pub mod io;
pub mod lang;
pub mod mixer;
pub mod model;
pub mod num;
pub mod pipeline;
pub mod protocol;
pub mod rater;
pub mod rules;
pub mod scoring;
pub mod selector;
pub mod tokenize;

use num_rational::BigRational;

pub use lang::detect_language;
pub use model::{Dialogue, DialogueTurn, Document, Domain, Language, Role};
pub use tokenize::{count_tokens, tokenize, TokenizerConfig};

/// Reference n-gram LM with `f64` probabilities.
pub type NgramLm = scoring::NgramLM<f64>;
/// Reference n-gram LM with `f32` probabilities.
pub type NgramLm32 = scoring::NgramLM<f32>;
/// Reference n-gram LM with exact rational probabilities (no logs).
pub type ExactNgramLm = scoring::NgramLM<BigRational>;
pub type TokenLogProbs = scoring::TokenLogProbs<f64>;
pub type ConFilterScore = selector::ConFilterScore<f64>;
pub type InstanceScore = selector::InstanceScore<f64>;
/// Complexity x quality score kept in exact rational arithmetic.
pub type ExactInstanceScore = selector::InstanceScore<BigRational>;
