//! Fixed-order add-k n-gram language model.
//!
//! `P(w | c) = (count(c, w) + k) / (count(c) + k * |V|)` where `c` is the
//! previous `order - 1` tokens (padded with a begin-of-sequence marker) and
//! `V` is the training vocabulary plus the unknown token. There is no backoff
//! and no end-of-sequence token, so every conditional is a plain ratio of
//! counts and can be checked by hand.

use std::collections::{BTreeSet, HashMap};

use crate::hashing::fnv1a64;
use crate::num::{Real, Scalar};
use crate::tokenize::{tokenize, TokenizerConfig};

use super::{BackendKind, ScoreError, Scorer, ScorerBackend, TokenLogProbs};

pub const UNK: &str = "<unk>";
/// Context padding marker; never predicted.
pub const BOS: &str = "<s>";

const UNK_ID: u32 = 0;
const BOS_ID: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct NgramLM<S> {
    order: usize,
    add_k: S,
    tokenizer: TokenizerConfig,
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    ngrams: HashMap<Vec<u32>, u64>,
    contexts: HashMap<Vec<u32>, u64>,
    identity: String,
}

impl<S: Scalar> NgramLM<S> {
    /// Builds a model from raw texts. Counts do not depend on document order.
    pub fn build<I, T>(corpus: I, order: usize, add_k: S, tokenizer: TokenizerConfig) -> Result<Self, ScoreError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if order == 0 {
            return Err(ScoreError::InvalidOrder(order));
        }
        if add_k <= S::zero() {
            return Err(ScoreError::InvalidAddK);
        }
        let docs: Vec<Vec<String>> = corpus.into_iter().map(|t| tokenize(t.as_ref(), &tokenizer)).collect();
        if docs.iter().all(Vec::is_empty) {
            return Err(ScoreError::EmptyCorpus);
        }
        let sorted: BTreeSet<&str> = docs.iter().flatten().map(String::as_str).filter(|t| *t != UNK).collect();
        let mut words = vec![UNK.to_string()];
        words.extend(sorted.into_iter().map(String::from));
        let vocab: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();

        let mut ngrams: HashMap<Vec<u32>, u64> = HashMap::new();
        let mut contexts: HashMap<Vec<u32>, u64> = HashMap::new();
        for doc in &docs {
            let mut ids = vec![BOS_ID; order - 1];
            ids.extend(doc.iter().map(|t| vocab[t.as_str()]));
            for window in ids.windows(order) {
                *ngrams.entry(window.to_vec()).or_insert(0) += 1;
                *contexts.entry(window[..order - 1].to_vec()).or_insert(0) += 1;
            }
        }

        let mut lm = NgramLM { order, add_k, tokenizer, vocab, words, ngrams, contexts, identity: String::new() };
        lm.identity = lm.fingerprint();
        Ok(lm)
    }

    fn fingerprint(&self) -> String {
        let mut entries: Vec<(&Vec<u32>, &u64)> = self.ngrams.iter().collect();
        entries.sort_unstable();
        let mut buf = Vec::new();
        for w in &self.words {
            buf.extend_from_slice(w.as_bytes());
            buf.push(0);
        }
        for (ng, c) in entries {
            for id in ng {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            buf.extend_from_slice(&c.to_le_bytes());
        }
        format!(
            "ngram:order={}:k={:?}:v={}:{:016x}",
            self.order,
            self.add_k,
            self.words.len(),
            fnv1a64(&buf) ^ fnv1a64(format!("{:?}", self.tokenizer).as_bytes())
        )
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> &S {
        &self.add_k
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    /// Vocabulary size including the unknown token.
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Vocabulary in id order; the unknown token comes first.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    fn id(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Context window ending just before `pos` in a BOS-padded id sequence.
    fn context_ids(&self, history: &[u32]) -> Vec<u32> {
        let need = self.order - 1;
        let mut ctx = vec![BOS_ID; need.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(need)..]);
        ctx
    }

    fn prob_ids(&self, ctx: &[u32], token: u32) -> S {
        let mut key = ctx.to_vec();
        key.push(token);
        let joint = self.ngrams.get(&key).copied().unwrap_or(0);
        let marginal = self.contexts.get(ctx).copied().unwrap_or(0);
        let v = S::from_count(self.vocab_size() as u64);
        (S::from_count(joint) + self.add_k.clone()) / (S::from_count(marginal) + self.add_k.clone() * v)
    }

    /// `P(token | history)`; only the last `order - 1` history tokens matter,
    /// and unseen tokens are read as the unknown token.
    pub fn probability(&self, history: &[&str], token: &str) -> S {
        let ids: Vec<u32> = history.iter().map(|t| self.id(t)).collect();
        self.prob_ids(&self.context_ids(&ids), self.id(token))
    }
}

impl<R: Real> NgramLM<R> {
    /// Log-probabilities of `continuation`, each conditioned on `context` and
    /// the earlier continuation tokens.
    pub fn token_logprobs(&self, context: &[String], continuation: &[String]) -> Vec<R> {
        let mut ids: Vec<u32> = context.iter().map(|t| self.id(t)).collect();
        let mut out = Vec::with_capacity(continuation.len());
        for tok in continuation {
            let id = self.id(tok);
            out.push(self.prob_ids(&self.context_ids(&ids), id).ln());
            ids.push(id);
        }
        out
    }
}

impl<R: Real> Scorer<R> for NgramLM<R> {
    fn backend(&self) -> ScorerBackend {
        ScorerBackend { kind: BackendKind::Ngram, identity: self.identity.clone() }
    }

    /// Context and continuation are tokenized separately.
    fn sequence_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError> {
        let cont = tokenize(continuation, &self.tokenizer);
        if cont.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        let ctx = tokenize(context, &self.tokenizer);
        let logprobs = self.token_logprobs(&ctx, &cont);
        Ok(TokenLogProbs { tokens: cont, logprobs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn hand_computed_bigram() {
        // corpus "a b a b", vocab {a, b, <unk>}: count(a b) = 2, count(a .) = 2
        let lm = NgramLM::<BigRational>::build(["a b a b"], 2, BigRational::one(), cfg()).unwrap();
        assert_eq!(lm.vocab_size(), 3);
        assert_eq!(lm.probability(&["a"], "b"), ratio(3, 5));
        assert_eq!(lm.probability(&[], "a"), ratio(2, 4));
        assert_eq!(lm.probability(&["b"], "a"), ratio(2, 4));
        assert_eq!(lm.probability(&["zzz"], "a"), ratio(1, 3));
        let f = NgramLM::<f64>::build(["a b a b"], 2, 1.0, cfg()).unwrap();
        assert!((f.probability(&["a"], "b") - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sequence_logprobs_bigram() {
        let lm = NgramLM::<f64>::build(["a b a b"], 2, 1.0, cfg()).unwrap();
        let out = lm.sequence_logprobs("", "a b").unwrap();
        assert_eq!(out.tokens, vec!["a", "b"]);
        assert_eq!(out.logprobs, vec![(0.5f64).ln(), (0.6f64).ln()]);
        assert_eq!(lm.sequence_logprobs("a b", ""), Err(ScoreError::EmptyContinuation));
    }

    #[test]
    fn build_errors() {
        assert_eq!(NgramLM::<f64>::build(Vec::<String>::new(), 2, 1.0, cfg()).unwrap_err(), ScoreError::EmptyCorpus);
        assert_eq!(NgramLM::<f64>::build(["", " ,"], 2, 1.0, cfg()).unwrap_err(), ScoreError::EmptyCorpus);
        assert_eq!(NgramLM::<f64>::build(["a"], 0, 1.0, cfg()).unwrap_err(), ScoreError::InvalidOrder(0));
        assert_eq!(NgramLM::<f64>::build(["a"], 2, 0.0, cfg()).unwrap_err(), ScoreError::InvalidAddK);
    }

    #[test]
    fn unigram_order() {
        let lm = NgramLM::<BigRational>::build(["a a b"], 1, BigRational::one(), cfg()).unwrap();
        assert_eq!(lm.probability(&["b"], "a"), ratio(3, 6));
    }

    #[test]
    fn f32_instantiation() {
        let lm = NgramLM::<f32>::build(["a b a b"], 2, 1.0f32, cfg()).unwrap();
        let out = lm.sequence_logprobs("a", "b").unwrap();
        assert!((out.logprobs[0] - 0.6f32.ln()).abs() < 1e-6);
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..8), 1..6)
            .prop_map(|docs| docs.into_iter().map(|d| d.join(" ")).collect())
            .prop_filter("non-empty corpus", |docs: &Vec<String>| docs.iter().any(|d| !d.is_empty()))
    }

    proptest! {
        #[test]
        fn conditionals_sum_to_one_exactly(corpus in corpus_strategy(), order in 1usize..4, hist in prop::collection::vec(prop::sample::select(vec!["a", "b", "x"]), 0..4)) {
            let lm = NgramLM::<BigRational>::build(&corpus, order, ratio(1, 2), cfg()).unwrap();
            let words: Vec<String> = lm.vocabulary().map(String::from).collect();
            let total = words.iter().fold(BigRational::zero(), |acc, w| acc + lm.probability(&hist, w));
            prop_assert_eq!(total, BigRational::one());
            let lmf = NgramLM::<f64>::build(&corpus, order, 0.5, cfg()).unwrap();
            let totalf: f64 = words.iter().map(|w| lmf.probability(&hist, w)).sum();
            prop_assert!((totalf - 1.0).abs() < 1e-9);
        }

        #[test]
        fn document_order_irrelevant(mut corpus in corpus_strategy(), order in 1usize..4) {
            let a = NgramLM::<f64>::build(&corpus, order, 1.0, cfg()).unwrap();
            corpus.reverse();
            let b = NgramLM::<f64>::build(&corpus, order, 1.0, cfg()).unwrap();
            prop_assert_eq!(a.identity(), b.identity());
            prop_assert_eq!(a.ngrams, b.ngrams);
        }

        #[test]
        fn conditioning_consistency(corpus in corpus_strategy(), c in "[abcd ]{0,12}", s in "[abcdx ]{1,12}") {
            let lm = NgramLM::<f64>::build(&corpus, 3, 1.0, cfg()).unwrap();
            let Ok(cond) = lm.sequence_logprobs(&c, &s) else { return Ok(()) };
            let joint = lm.sequence_logprobs("", &format!("{c} {s}")).unwrap();
            let tail = &joint.logprobs[joint.len() - cond.len()..];
            prop_assert_eq!(tail, &cond.logprobs[..]);
        }
    }
}
