use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dedup::MinHashConfig;
use crate::mixer::{LanguageScope, MixSpec, Stage};
use crate::rules::RuleConfig;
use crate::scoring::BackendKind;
use crate::selector::SelectionConfig;
use crate::tokenize::TokenizerConfig;

use super::PipelineError;

pub const SCORER_ENDPOINT_ENV: &str = "CURATE_SCORER_ENDPOINT";
pub const RATER_ENDPOINT_ENV: &str = "CURATE_RATER_ENDPOINT";
pub const JUDGE_ENDPOINT_ENV: &str = "CURATE_JUDGE_ENDPOINT";

/// Whole-pipeline configuration, one section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Tokenizer for scoring, selection, mixing and stats.
    pub tokenizer: TokenizerConfig,
    pub filter: FilterSection,
    pub dedup: MinHashConfig,
    pub scorer: ScorerSection,
    pub selector: SelectorSection,
    pub rater: RaterSection,
    pub mixer: MixerSection,
    pub dpo: DpoSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    #[serde(flatten)]
    pub rules: RuleConfig,
    /// Toxic terms, one per line; enables the toxicity rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon_file: Option<PathBuf>,
    /// PII patterns (`email`, `phone` or `regex:...`), one per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub backend: BackendKind,
    pub order: usize,
    pub add_k: f64,
    /// Plain-text training files for the n-gram backend, one document per
    /// line. When empty, the LM is trained on the input dialogues.
    pub corpus: Vec<PathBuf>,
    pub vocab_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        ScorerSection {
            backend: BackendKind::Ngram,
            order: 2,
            add_k: 1.0,
            corpus: Vec::new(),
            vocab_size: 50_000,
            endpoint: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceScorerKind {
    /// Distinct-token complexity and length-table quality; a stub.
    #[default]
    Reference,
    /// Precomputed `complexity` and `quality` record fields.
    Fields,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorSection {
    #[serde(flatten)]
    pub selection: SelectionConfig,
    pub instance_scorer: InstanceScorerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemoteOrStub {
    #[default]
    Stub,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateMode {
    /// Double scoring with discrepancy removal.
    #[default]
    Score,
    /// Two-round label agreement.
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaterSection {
    pub mode: RateMode,
    pub backend: RemoteOrStub,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub discrepancy_threshold: f64,
    /// Stub rater noise, in half points per round.
    pub noise: u32,
    /// Stub labeler per-round flip probability.
    pub flip_rate: f64,
    pub labels: Vec<String>,
}

impl Default for RaterSection {
    fn default() -> Self {
        RaterSection {
            mode: RateMode::Score,
            backend: RemoteOrStub::Stub,
            endpoint: None,
            timeout_secs: 60,
            discrepancy_threshold: crate::rater::DEFAULT_DISCREPANCY,
            noise: 3,
            flip_rate: 0.1,
            labels: vec!["medical".into(), "general".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerSection {
    pub stage: Stage,
    /// Defaults to 19:1 for the stable stage and 1:1 for the boost stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_ratio: Option<[u64; 2]>,
    /// zh:en; defaults to 1:9 (stable) and 4:6 (boost).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language_ratio: Option<[u64; 2]>,
    pub token_budget: u64,
    pub max_repeats: u32,
    pub tolerance_pct: f64,
    pub language_scope: LanguageScope,
}

impl Default for MixerSection {
    fn default() -> Self {
        MixerSection {
            stage: Stage::Stable,
            domain_ratio: None,
            language_ratio: None,
            token_budget: 1_000_000,
            max_repeats: 1,
            tolerance_pct: 1.0,
            language_scope: LanguageScope::WholeMix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSection {
    pub judge: RemoteOrStub,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
}

impl Default for DpoSection {
    fn default() -> Self {
        DpoSection { judge: RemoteOrStub::Stub, endpoint: None, timeout_secs: 60 }
    }
}

fn check_file(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reads a TOML config; relative file references are resolved against the
    /// config's directory and must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.filter.lexicon_file.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = cfg.filter.pattern_file.as_mut() {
            resolve(base, p);
        }
        for p in &mut cfg.scorer.corpus {
            resolve(base, p);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn check_files(&self) -> Result<(), PipelineError> {
        if let Some(p) = &self.filter.lexicon_file {
            check_file(p, "lexicon file")?;
        }
        if let Some(p) = &self.filter.pattern_file {
            check_file(p, "pattern file")?;
        }
        for p in &self.scorer.corpus {
            check_file(p, "scorer corpus file")?;
        }
        Ok(())
    }

    /// Fills unset endpoints from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(SCORER_ENDPOINT_ENV) {
            self.scorer.endpoint = Some(v);
        }
        if let Some(v) = get(RATER_ENDPOINT_ENV) {
            self.rater.endpoint = Some(v);
        }
        if let Some(v) = get(JUDGE_ENDPOINT_ENV) {
            self.dpo.endpoint = Some(v);
        }
    }

    /// Rule configuration with list files applied.
    pub fn rule_config(&self) -> Result<RuleConfig, PipelineError> {
        let mut rules = self.filter.rules.clone();
        if let Some(p) = &self.filter.lexicon_file {
            rules = rules.with_lexicon_file(p).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let Some(p) = &self.filter.pattern_file {
            rules = rules.with_pattern_file(p).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        rules.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(rules)
    }

    pub fn mix_spec(&self) -> Result<MixSpec, PipelineError> {
        let m = &self.mixer;
        let mut spec = match m.stage {
            Stage::Stable => MixSpec::stable(m.token_budget, self.seed),
            Stage::Boost => MixSpec::boost(m.token_budget, self.seed),
        };
        if let Some(r) = m.domain_ratio {
            spec.domain_ratio = r;
        }
        if let Some(r) = m.language_ratio {
            spec.language_ratio = r;
        }
        spec.max_repeats = m.max_repeats;
        spec.tolerance_pct = m.tolerance_pct;
        spec.language_scope = m.language_scope;
        spec.tokenizer = self.tokenizer;
        spec.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON form, ignoring the worker count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        crate::hashing::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
