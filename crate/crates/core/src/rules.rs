//! Rule-based cleaning of pretraining documents.
//!
//! Every enabled rule is evaluated for every document, so a verdict always
//! lists the complete set of failures.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Document;
use crate::tokenize::{is_cjk, TokenizerConfig, Tokens};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("min_tokens must be at least 1")]
    MinTokens,
    #[error("max_special_char_ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("toxicity check enabled with an empty lexicon")]
    EmptyLexicon,
    #[error("pii check enabled with no patterns")]
    NoPatterns,
    #[error("invalid pattern '{pattern}': {source}")]
    Pattern { pattern: String, source: regex::Error },
    #[error("{0}")]
    UnknownPattern(String),
    #[error("cannot read {path}: {source}")]
    File { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    MinTokens,
    SpecialCharRatio,
    Toxic,
    Pii,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleId::MinTokens => "min_tokens",
            RuleId::SpecialCharRatio => "special_char_ratio",
            RuleId::Toxic => "toxic",
            RuleId::Pii => "pii",
        })
    }
}

/// A PII pattern: the built-in `email` / `phone` detectors or `regex:<expr>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PiiPattern {
    Email,
    Phone,
    Regex(String),
}

impl TryFrom<String> for PiiPattern {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.trim() {
            "email" => Ok(PiiPattern::Email),
            "phone" => Ok(PiiPattern::Phone),
            other => other
                .strip_prefix("regex:")
                .map(|r| PiiPattern::Regex(r.to_string()))
                .ok_or_else(|| format!("unknown pii pattern '{other}' (expected email, phone or regex:<expr>)")),
        }
    }
}

impl From<PiiPattern> for String {
    fn from(p: PiiPattern) -> String {
        match p {
            PiiPattern::Email => "email".into(),
            PiiPattern::Phone => "phone".into(),
            PiiPattern::Regex(r) => format!("regex:{r}"),
        }
    }
}

const EMAIL: &str = r"(?i)[a-z0-9._%+-]+@[a-z0-9-]+(?:\.[a-z0-9-]+)*\.[a-z]{2,}";
// Mainland mobile numbers and NANP/international-style numbers, not embedded in longer digit runs.
const PHONE: &str = r"(?:^|\D)(?:1[3-9]\d{9}|(?:\+\d{1,3}[ .-]?)?(?:\(\d{3}\)|\d{3})[ .-]?\d{3}[ .-]?\d{4})(?:\D|$)";

impl PiiPattern {
    fn regex(&self) -> Result<Regex, RuleError> {
        let expr = match self {
            PiiPattern::Email => EMAIL,
            PiiPattern::Phone => PHONE,
            PiiPattern::Regex(r) => r.as_str(),
        };
        Regex::new(expr).map_err(|source| RuleError::Pattern { pattern: expr.to_string(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub min_tokens: u64,
    pub max_special_char_ratio: f64,
    pub check_toxicity: bool,
    pub toxic_lexicon: Vec<String>,
    pub check_pii: bool,
    pub pii_patterns: Vec<PiiPattern>,
    /// Used to match lexicon terms on token boundaries.
    pub tokenizer: TokenizerConfig,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            min_tokens: 32,
            max_special_char_ratio: 0.30,
            check_toxicity: false,
            toxic_lexicon: Vec::new(),
            check_pii: true,
            pii_patterns: vec![PiiPattern::Email, PiiPattern::Phone],
            tokenizer: TokenizerConfig::default(),
        }
    }
}

/// One entry per line; blank lines and `#` comments are skipped.
pub fn load_list(path: impl AsRef<Path>) -> Result<Vec<String>, RuleError> {
    let path = path.as_ref();
    let body =
        fs::read_to_string(path).map_err(|source| RuleError::File { path: path.display().to_string(), source })?;
    Ok(body.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

impl RuleConfig {
    /// Enables the toxicity check with terms from a lexicon file.
    pub fn with_lexicon_file(mut self, path: impl AsRef<Path>) -> Result<Self, RuleError> {
        self.toxic_lexicon = load_list(path)?;
        self.check_toxicity = true;
        Ok(self)
    }

    pub fn with_pattern_file(mut self, path: impl AsRef<Path>) -> Result<Self, RuleError> {
        let lines = load_list(path)?;
        self.pii_patterns = lines
            .into_iter()
            .map(|l| PiiPattern::try_from(l).map_err(RuleError::UnknownPattern))
            .collect::<Result<_, _>>()?;
        self.check_pii = true;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if self.min_tokens < 1 {
            return Err(RuleError::MinTokens);
        }
        if !(0.0..=1.0).contains(&self.max_special_char_ratio) {
            return Err(RuleError::Ratio(self.max_special_char_ratio));
        }
        if self.check_toxicity && self.toxic_lexicon.is_empty() {
            return Err(RuleError::EmptyLexicon);
        }
        if self.check_pii && self.pii_patterns.is_empty() {
            return Err(RuleError::NoPatterns);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub passed: bool,
    pub failed_rules: Vec<RuleId>,
}

impl FilterVerdict {
    pub fn from_failures(failed_rules: Vec<RuleId>) -> Self {
        FilterVerdict { passed: failed_rules.is_empty(), failed_rules }
    }
}

/// Share of non-whitespace code points that are not letters, digits or CJK.
/// Zero for text with no non-whitespace characters.
pub fn special_char_ratio(text: &str) -> f64 {
    let (mut special, mut total) = (0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if !(c.is_alphanumeric() || is_cjk(c)) {
            special += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        special as f64 / total as f64
    }
}

/// A validated, compiled [`RuleConfig`].
#[derive(Debug, Clone)]
pub struct RuleSet {
    config: RuleConfig,
    lexicon: HashMap<String, Vec<Vec<String>>>,
    pii: Vec<Regex>,
}

impl RuleSet {
    pub fn new(config: RuleConfig) -> Result<Self, RuleError> {
        config.validate()?;
        let mut lexicon: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        if config.check_toxicity {
            for term in &config.toxic_lexicon {
                let toks: Vec<String> = Tokens::new(term, config.tokenizer.scheme).map(str::to_lowercase).collect();
                if let Some(first) = toks.first() {
                    lexicon.entry(first.clone()).or_default().push(toks);
                }
            }
        }
        let pii = if config.check_pii {
            config.pii_patterns.iter().map(PiiPattern::regex).collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(RuleSet { config, lexicon, pii })
    }

    pub fn config(&self) -> &RuleConfig {
        &self.config
    }

    fn is_toxic(&self, text: &str) -> bool {
        let toks: Vec<String> = Tokens::new(text, self.config.tokenizer.scheme).map(str::to_lowercase).collect();
        toks.iter()
            .enumerate()
            .any(|(i, t)| self.lexicon.get(t).is_some_and(|terms| terms.iter().any(|term| toks[i..].starts_with(term))))
    }

    pub fn apply(&self, doc: &Document) -> FilterVerdict {
        let mut failed = Vec::new();
        if doc.token_count < self.config.min_tokens {
            failed.push(RuleId::MinTokens);
        }
        if special_char_ratio(&doc.text) > self.config.max_special_char_ratio {
            failed.push(RuleId::SpecialCharRatio);
        }
        if self.config.check_toxicity && self.is_toxic(&doc.text) {
            failed.push(RuleId::Toxic);
        }
        if self.pii.iter().any(|r| r.is_match(&doc.text)) {
            failed.push(RuleId::Pii);
        }
        FilterVerdict::from_failures(failed)
    }
}

pub fn apply_rules(doc: &Document, rules: &RuleSet) -> FilterVerdict {
    rules.apply(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedDocument {
    #[serde(flatten)]
    pub document: Document,
    pub failed_rules: Vec<RuleId>,
}

#[derive(Debug, Default)]
pub struct FilterOutcome {
    pub passed: Vec<Document>,
    pub rejected: Vec<RejectedDocument>,
}

/// Partitions documents; both sides keep input order. Verdicts are computed
/// in parallel on the current rayon pool.
pub fn filter_stream(docs: Vec<Document>, rules: &RuleSet) -> FilterOutcome {
    let verdicts: Vec<FilterVerdict> = docs.par_iter().map(|d| rules.apply(d)).collect();
    let mut out = FilterOutcome::default();
    for (document, v) in docs.into_iter().zip(verdicts) {
        if v.passed {
            out.passed.push(document);
        } else {
            out.rejected.push(RejectedDocument { document, failed_rules: v.failed_rules });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Domain, Language};
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text, Language::En, Domain::General, "t", &TokenizerConfig::default())
    }

    fn rules(config: RuleConfig) -> RuleSet {
        RuleSet::new(config).unwrap()
    }

    #[test]
    fn short_doc_fails_min_tokens_only() {
        let d = doc("one two three four five six seven eight nine ten");
        assert_eq!(d.token_count, 10);
        let v = rules(RuleConfig::default()).apply(&d);
        assert_eq!(v, FilterVerdict { passed: false, failed_rules: vec![RuleId::MinTokens] });
    }

    #[test]
    fn special_chars() {
        assert_eq!(special_char_ratio("ab!!"), 0.5);
        assert_eq!(special_char_ratio("abc 123 医生"), 0.0);
        assert_eq!(special_char_ratio(""), 0.0);
        let v = rules(RuleConfig { min_tokens: 1, ..Default::default() }).apply(&doc("ab!!"));
        assert!(v.failed_rules.contains(&RuleId::SpecialCharRatio));
        // empty text fails min_tokens, nothing else
        let v = rules(RuleConfig::default()).apply(&doc(""));
        assert_eq!(v.failed_rules, vec![RuleId::MinTokens]);
    }

    /// Independent oracle: a hand-written scan for `local@domain.tld`.
    fn naive_has_email(text: &str) -> bool {
        text.split_whitespace().any(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric());
            match w.split_once('@') {
                Some((local, domain)) => {
                    !local.is_empty()
                        && domain.contains('.')
                        && domain
                            .rsplit('.')
                            .next()
                            .is_some_and(|tld| tld.len() >= 2 && tld.chars().all(|c| c.is_ascii_alphabetic()))
                }
                None => false,
            }
        })
    }

    #[test]
    fn email_pii_detected() {
        let rs = rules(RuleConfig { min_tokens: 1, ..Default::default() });
        for text in
            ["contact me at a@b.com", "no contact details here", "mail: dr.li@hospital.org.cn today", "at sign @ alone"]
        {
            let flagged = rs.apply(&doc(text)).failed_rules.contains(&RuleId::Pii);
            assert_eq!(flagged, naive_has_email(text), "{text}");
        }
    }

    #[test]
    fn phone_pii_detected() {
        let rs = rules(RuleConfig { min_tokens: 1, ..Default::default() });
        assert!(rs.apply(&doc("请拨打13812345678联系")).failed_rules.contains(&RuleId::Pii));
        assert!(rs.apply(&doc("call (555) 123-4567 now")).failed_rules.contains(&RuleId::Pii));
        assert!(!rs.apply(&doc("dose 500 mg twice daily")).failed_rules.contains(&RuleId::Pii));
    }

    #[test]
    fn toxicity_on_word_boundaries() {
        let cfg = RuleConfig {
            min_tokens: 1,
            check_toxicity: true,
            toxic_lexicon: vec!["idiot".into(), "shut up".into(), "废物".into()],
            ..Default::default()
        };
        let rs = rules(cfg);
        assert!(rs.apply(&doc("you IDIOT")).failed_rules.contains(&RuleId::Toxic));
        assert!(!rs.apply(&doc("idiotic design")).failed_rules.contains(&RuleId::Toxic));
        assert!(rs.apply(&doc("please shut, up")).failed_rules.contains(&RuleId::Toxic));
        assert!(rs.apply(&doc("你这个废物")).failed_rules.contains(&RuleId::Toxic));
    }

    #[test]
    fn all_rules_reported() {
        let cfg = RuleConfig { check_toxicity: true, toxic_lexicon: vec!["idiot".into()], ..Default::default() };
        let v = rules(cfg).apply(&doc("idiot!!! a@b.com ###"));
        assert_eq!(v.failed_rules, vec![RuleId::MinTokens, RuleId::SpecialCharRatio, RuleId::Toxic, RuleId::Pii]);
    }

    #[test]
    fn config_validation() {
        assert!(RuleSet::new(RuleConfig { min_tokens: 0, ..Default::default() }).is_err());
        assert!(RuleSet::new(RuleConfig { max_special_char_ratio: 1.5, ..Default::default() }).is_err());
        assert!(RuleSet::new(RuleConfig { check_toxicity: true, ..Default::default() }).is_err());
        assert!(RuleSet::new(RuleConfig { pii_patterns: vec![], ..Default::default() }).is_err());
        assert!(RuleSet::new(RuleConfig { pii_patterns: vec![PiiPattern::Regex("(".into())], ..Default::default() })
            .is_err());
    }

    #[test]
    fn list_files() {
        let dir = tempfile::tempdir().unwrap();
        let lex = dir.path().join("lex.txt");
        let pat = dir.path().join("pat.txt");
        fs::write(&lex, "# comment\nidiot\n\nmoron\n").unwrap();
        fs::write(&pat, "email\nregex:\\bMRN\\d+\n").unwrap();
        let cfg = RuleConfig::default().with_lexicon_file(&lex).unwrap().with_pattern_file(&pat).unwrap();
        assert_eq!(cfg.toxic_lexicon, vec!["idiot", "moron"]);
        assert_eq!(cfg.pii_patterns, vec![PiiPattern::Email, PiiPattern::Regex("\\bMRN\\d+".into())]);
        let rs = rules(RuleConfig { min_tokens: 1, ..cfg });
        assert!(rs.apply(&doc("record MRN12345")).failed_rules.contains(&RuleId::Pii));
    }

    #[test]
    fn stream_partition() {
        let rs = rules(RuleConfig { min_tokens: 2, ..Default::default() });
        let out = filter_stream(Vec::new(), &rs);
        assert!(out.passed.is_empty() && out.rejected.is_empty());
        let docs = vec![doc("a b"), doc("c"), doc("d e f")];
        let out = filter_stream(docs, &rs);
        assert_eq!(out.passed.len() + out.rejected.len(), 3);
        assert_eq!(out.passed.iter().map(|d| d.text.as_str()).collect::<Vec<_>>(), vec!["a b", "d e f"]);
        assert_eq!(out.rejected[0].document.text, "c");
    }

    proptest! {
        #[test]
        fn alphanumeric_ratio_is_zero(s in "[a-zA-Z0-9 \\t]{0,50}") {
            prop_assert_eq!(special_char_ratio(&s), 0.0);
        }

        #[test]
        fn tightening_never_rescues(
            text in "[a-z!?@#. ]{0,80}",
            min in 1u64..20, extra_min in 0u64..10,
            ratio in 0.0f64..1.0, cut in 0.0f64..1.0,
        ) {
            let d = doc(&text);
            let base = RuleConfig { min_tokens: min, max_special_char_ratio: ratio, check_pii: false, ..Default::default() };
            let before = rules(base.clone()).apply(&d);
            let tighter_min = rules(RuleConfig { min_tokens: min + extra_min, ..base.clone() }).apply(&d);
            let tighter_ratio = rules(RuleConfig { max_special_char_ratio: ratio * cut, ..base.clone() }).apply(&d);
            let with_lex = rules(RuleConfig { check_toxicity: true, toxic_lexicon: vec!["ab".into()], ..base }).apply(&d);
            if !before.passed {
                prop_assert!(!tighter_min.passed && !tighter_ratio.passed && !with_lex.passed);
            }
        }
    }
}
