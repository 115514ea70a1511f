//! Stage dispatcher behind the command-line tool.
//!
//! Every stage reads JSONL inputs, writes its main output plus sidecar files
//! next to it, and records a run manifest (`<output>.run.json`) with the
//! config hash, seed, file checksums and counts. Stages compose only through
//! files.

mod config;

pub use config::{
    DpoSection, FilterSection, InstanceScorerKind, MixerSection, PipelineConfig, RateMode, RaterSection, RemoteOrStub,
    ScorerSection, SelectorSection, JUDGE_ENDPOINT_ENV, RATER_ENDPOINT_ENV, SCORER_ENDPOINT_ENV,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dedup::dedup;
use crate::dpo::{self, ExternalJudge, Judge, ObjectiveQuestion, StubJudge, SubjectiveItem};
use crate::io::{
    self, read_all, sidecar, write_documents, write_json, write_records, DatasetManifest, IngestError, Record,
    RejectRecord,
};
use crate::mixer::{plan_mix, sample_mix, verify_mix, BucketSource, MixError, MixReport};
use crate::model::{Dialogue, Document};
use crate::rater::{self, ExternalLabeler, ExternalRater, Labeler, Rater, StubLabeler, StubRater};
use crate::rules::{filter_stream, RuleSet};
use crate::scoring::{BackendKind, ExternalScorer, NgramLM, ScoreError, Scorer, UniformScorer};
use crate::selector::{
    render_history, select_multi_turn, select_single_turn, FieldScorer, InstanceScorer, InstructionRecord,
    ReferenceScorer, SelectError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("external service error: {0}")]
    External(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::External(_) => 4,
        }
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<MixError> for PipelineError {
    fn from(e: MixError) -> Self {
        match e {
            MixError::Spec(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

fn external(e: ScoreError) -> PipelineError {
    PipelineError::External(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Filter,
    Dedup,
    Confilter,
    Select,
    Rate,
    Mix,
    Dpo,
    Verify,
    Stats,
}

impl Subcommand {
    pub const ALL: [Subcommand; 9] = [
        Subcommand::Filter,
        Subcommand::Dedup,
        Subcommand::Confilter,
        Subcommand::Select,
        Subcommand::Rate,
        Subcommand::Mix,
        Subcommand::Dpo,
        Subcommand::Verify,
        Subcommand::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Filter => "filter",
            Subcommand::Dedup => "dedup",
            Subcommand::Confilter => "confilter",
            Subcommand::Select => "select",
            Subcommand::Rate => "rate",
            Subcommand::Mix => "mix",
            Subcommand::Dpo => "dpo",
            Subcommand::Verify => "verify",
            Subcommand::Stats => "stats",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subcommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subcommand::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown subcommand '{s}'"))
    }
}

/// One stage invocation. Inputs may be `name=path` where a stage needs
/// named inputs (`mix` buckets, `dpo` streams).
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub subcommand: Subcommand,
    pub inputs: Vec<String>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok(FileDigest { file: io::file_name(path), sha256: crate::hashing::sha256_hex(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: Subcommand,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: BTreeMap<String, u64>,
    /// Stage parameters that shaped the output, e.g. the cf window or scorer identity.
    pub parameters: Value,
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        sidecar(output, "run.json")
    }
}

struct Stage<'a> {
    cfg: &'a PipelineConfig,
    inputs: Vec<(Option<String>, PathBuf)>,
    output: Option<PathBuf>,
    written: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
    parameters: Value,
}

fn split_named(input: &str) -> (Option<String>, PathBuf) {
    match input.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\', '.']) => {
            (Some(name.to_string()), PathBuf::from(path))
        }
        _ => (None, PathBuf::from(input)),
    }
}

impl Stage<'_> {
    fn output(&self) -> Result<&Path, PipelineError> {
        self.output.as_deref().ok_or_else(|| PipelineError::Config("--output is required for this stage".into()))
    }

    fn paths(&self) -> Result<Vec<&Path>, PipelineError> {
        if self.inputs.is_empty() {
            return Err(PipelineError::Config("at least one --input is required".into()));
        }
        Ok(self.inputs.iter().map(|(_, p)| p.as_path()).collect())
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n as u64);
    }

    fn read<T: Record>(&mut self) -> Result<(Vec<T>, Vec<RejectRecord>), PipelineError> {
        let mut records = Vec::new();
        let mut rejects = Vec::new();
        for p in self.paths()? {
            let (r, j) = read_all::<T>(p)?;
            records.extend(r);
            rejects.extend(j);
        }
        Ok((records, rejects))
    }

    fn write<T: Serialize>(&mut self, path: PathBuf, records: &[T]) -> Result<(), PipelineError> {
        write_records(&path, records)?;
        self.written.push(path);
        Ok(())
    }

    fn write_docs(&mut self, path: PathBuf, docs: &[Document]) -> Result<(), PipelineError> {
        let manifest = write_documents(docs, &path)?;
        let mpath = DatasetManifest::sidecar_path(&path);
        manifest.save(&mpath)?;
        self.written.push(path);
        self.written.push(mpath);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<(), PipelineError> {
        write_json(&path, value)?;
        self.written.push(path);
        Ok(())
    }

    fn sidecar(&self, suffix: &str) -> Result<PathBuf, PipelineError> {
        Ok(sidecar(self.output()?, suffix))
    }

    fn write_rejects(&mut self, rejects: &[RejectRecord]) -> Result<(), PipelineError> {
        self.count("invalid_lines", rejects.len());
        if !rejects.is_empty() {
            let p = self.sidecar("invalid.jsonl")?;
            self.write(p, rejects)?;
        }
        Ok(())
    }
}

/// Runs one stage on a worker pool sized from the config and writes its run
/// manifest next to the output (when there is one).
pub fn run(cfg: &PipelineConfig, request: &RunRequest) -> Result<RunManifest, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let started = Instant::now();
    let mut stage = Stage {
        cfg,
        inputs: request.inputs.iter().map(|s| split_named(s)).collect(),
        output: request.output.clone(),
        written: Vec::new(),
        counts: BTreeMap::new(),
        parameters: Value::Null,
    };
    let status = pool.install(|| match request.subcommand {
        Subcommand::Filter => run_filter(&mut stage),
        Subcommand::Dedup => run_dedup(&mut stage),
        Subcommand::Confilter => run_confilter(&mut stage),
        Subcommand::Select => run_select(&mut stage),
        Subcommand::Rate => run_rate(&mut stage),
        Subcommand::Mix => run_mix(&mut stage),
        Subcommand::Dpo => run_dpo(&mut stage),
        Subcommand::Verify => run_verify(&mut stage),
        Subcommand::Stats => run_stats(&mut stage),
    });
    let mut manifest = RunManifest {
        subcommand: request.subcommand,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: stage.inputs.iter().map(|(_, p)| FileDigest::of(p)).collect::<Result<_, _>>().unwrap_or_default(),
        outputs: stage.written.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
        counts: stage.counts,
        parameters: stage.parameters,
        timings_ms: BTreeMap::from([("total".to_string(), started.elapsed().as_millis() as u64)]),
    };
    if let Some(out) = &stage.output {
        if status.is_ok() || !manifest.outputs.is_empty() {
            manifest.counts.insert("failed".into(), status.is_err() as u64);
            write_json(RunManifest::path_for(out), &manifest)?;
        }
    }
    status.map(|_| manifest)
}

fn run_filter(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let rules = RuleSet::new(s.cfg.rule_config()?).map_err(|e| PipelineError::Config(e.to_string()))?;
    let (docs, rejects) = s.read::<Document>()?;
    s.count("input", docs.len());
    let out = filter_stream(docs, &rules);
    s.count("passed", out.passed.len());
    s.count("rejected", out.rejected.len());
    let mut per_rule = BTreeMap::new();
    for r in &out.rejected {
        for id in &r.failed_rules {
            *per_rule.entry(id.to_string()).or_insert(0u64) += 1;
        }
    }
    s.parameters = json!({"rules": rules.config(), "rejections_by_rule": per_rule});
    let output = s.output()?.to_path_buf();
    s.write_docs(output, &out.passed)?;
    let p = s.sidecar("rejected.jsonl")?;
    s.write(p, &out.rejected)?;
    s.write_rejects(&rejects)
}

fn run_dedup(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let (docs, rejects) = s.read::<Document>()?;
    s.count("input", docs.len());
    let out = dedup(docs, &s.cfg.dedup).map_err(|e| PipelineError::Config(e.to_string()))?;
    s.count("kept", out.kept.len());
    s.count("exact_dropped", out.exact_dropped.len());
    s.count("near_dropped", out.clusters.iter().map(|c| c.dropped_ids.len()).sum());
    s.count("clusters", out.clusters.len());
    s.parameters = json!({"dedup": s.cfg.dedup});
    let output = s.output()?.to_path_buf();
    s.write_docs(output, &out.kept)?;
    let p = s.sidecar("dedup.json")?;
    s.write_json(p, &json!({"exact": out.exact_dropped, "clusters": out.clusters}))?;
    s.write_rejects(&rejects)
}

fn timeout(secs: u64) -> Duration {
    Duration::from_secs(secs.max(1))
}

fn endpoint<'a>(e: &'a Option<String>, what: &str, env: &str) -> Result<&'a str, PipelineError> {
    e.as_deref().ok_or_else(|| {
        PipelineError::Config(format!("{what} backend is external but no endpoint is set (config or {env})"))
    })
}

/// Builds the configured log-probability backend. Without a corpus the
/// n-gram LM is trained on the dialogues themselves.
fn build_scorer(cfg: &PipelineConfig, dialogues: &[Dialogue]) -> Result<Box<dyn Scorer<f64>>, PipelineError> {
    let sc = &cfg.scorer;
    Ok(match sc.backend {
        BackendKind::Uniform => {
            if sc.vocab_size == 0 {
                return Err(PipelineError::Config("uniform scorer needs vocab_size >= 1".into()));
            }
            Box::new(UniformScorer::new(sc.vocab_size, cfg.tokenizer))
        }
        BackendKind::Ngram => {
            let corpus: Vec<String> = if sc.corpus.is_empty() {
                dialogues.iter().map(|d| render_history(d, d.num_rounds() + 1)).collect()
            } else {
                let mut lines = Vec::new();
                for p in &sc.corpus {
                    let body =
                        std::fs::read_to_string(p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
                    lines.extend(body.lines().filter(|l| !l.trim().is_empty()).map(String::from));
                }
                lines
            };
            let lm = NgramLM::<f64>::build(corpus, sc.order, sc.add_k, cfg.tokenizer).map_err(|e| match e {
                ScoreError::EmptyCorpus => PipelineError::Data(e.to_string()),
                other => PipelineError::Config(other.to_string()),
            })?;
            Box::new(lm)
        }
        BackendKind::External => {
            let ep = endpoint(&sc.endpoint, "scorer", SCORER_ENDPOINT_ENV)?;
            Box::new(ExternalScorer::connect(ep, timeout(sc.timeout_secs)).map_err(external)?)
        }
    })
}

fn instance_scorer(cfg: &PipelineConfig) -> Box<dyn InstanceScorer<f64>> {
    match cfg.selector.instance_scorer {
        InstanceScorerKind::Reference => Box::new(ReferenceScorer { tokenizer: cfg.tokenizer }),
        InstanceScorerKind::Fields => Box::new(FieldScorer),
    }
}

fn error_lines<T: Serialize, E: fmt::Display>(errors: &[(T, E)]) -> Vec<Value> {
    errors.iter().map(|(r, e)| json!({"error": e.to_string(), "record": r})).collect()
}

fn run_confilter(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let (dialogues, rejects) = s.read::<Dialogue>()?;
    s.count("input", dialogues.len());
    let scorer = build_scorer(s.cfg, &dialogues)?;
    let instance = instance_scorer(s.cfg);
    let sel = &s.cfg.selector.selection;
    let out = select_multi_turn(dialogues, scorer.as_ref(), instance.as_ref(), sel)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    s.count("kept", out.kept.len());
    s.count("dropped", out.dropped.len());
    s.count("errors", out.errors.len());
    s.parameters = json!({"selection": sel, "scorer": scorer.backend(), "instance_scorer": instance.name()});
    let output = s.output()?.to_path_buf();
    s.write(output, &out.kept)?;
    let p = s.sidecar("dropped.jsonl")?;
    s.write(p, &out.dropped)?;
    let p = s.sidecar("report.jsonl")?;
    s.write(p, &out.reports)?;
    if !out.errors.is_empty() {
        let p = s.sidecar("errors.jsonl")?;
        s.write(p, &error_lines(&out.errors))?;
    }
    s.write_rejects(&rejects)?;
    let transport =
        out.errors.iter().find(|(_, e)| matches!(e, SelectError::Score { source, .. } if source.is_retriable()));
    match transport {
        Some((_, e)) => Err(PipelineError::External(e.to_string())),
        None => Ok(()),
    }
}

fn run_select(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let (records, rejects) = s.read::<InstructionRecord>()?;
    s.count("input", records.len());
    let instance = instance_scorer(s.cfg);
    let threshold = s.cfg.selector.selection.s_threshold;
    let out = select_single_turn(records, instance.as_ref(), &threshold);
    let annotate = |items: Vec<crate::selector::ScoredInstruction<f64>>| -> Vec<InstructionRecord> {
        items
            .into_iter()
            .map(|it| {
                let mut r = it.record;
                r.complexity = Some(it.score.complexity);
                r.quality = Some(it.score.quality);
                r.extra.insert("score".into(), json!(it.score.combined));
                r
            })
            .collect()
    };
    s.count("kept", out.kept.len());
    s.count("dropped", out.dropped.len());
    s.count("errors", out.errors.len());
    s.parameters = json!({"s_threshold": threshold, "instance_scorer": instance.name()});
    let errors = error_lines(&out.errors);
    let (kept, dropped) = (annotate(out.kept), annotate(out.dropped));
    let output = s.output()?.to_path_buf();
    s.write(output, &kept)?;
    let p = s.sidecar("dropped.jsonl")?;
    s.write(p, &dropped)?;
    if !errors.is_empty() {
        let p = s.sidecar("errors.jsonl")?;
        s.write(p, &errors)?;
    }
    s.write_rejects(&rejects)
}

fn run_rate(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let rc = &s.cfg.rater;
    let (docs, rejects) = s.read::<Document>()?;
    s.count("input", docs.len());
    let is_external = rc.backend == RemoteOrStub::External;
    let (kept, removed, records, errors, identity): (_, _, Vec<Value>, _, String) = match rc.mode {
        RateMode::Score => {
            let rater: Box<dyn Rater> = match rc.backend {
                RemoteOrStub::Stub => Box::new(StubRater { seed: s.cfg.seed, noise: rc.noise }),
                RemoteOrStub::External => Box::new(
                    ExternalRater::connect(
                        endpoint(&rc.endpoint, "rater", RATER_ENDPOINT_ENV)?,
                        timeout(rc.timeout_secs),
                    )
                    .map_err(external)?,
                ),
            };
            let out = rater::double_score_filter(docs, rater.as_ref(), rc.discrepancy_threshold)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            let recs = out.records.iter().map(|r| json!(r)).collect();
            (out.kept, out.removed, recs, error_lines(&out.errors), rater.identity())
        }
        RateMode::Label => {
            let labeler: Box<dyn Labeler> = match rc.backend {
                RemoteOrStub::Stub => {
                    Box::new(StubLabeler { seed: s.cfg.seed, flip_rate: rc.flip_rate, labels: rc.labels.clone() })
                }
                RemoteOrStub::External => Box::new(
                    ExternalLabeler::connect(
                        endpoint(&rc.endpoint, "rater", RATER_ENDPOINT_ENV)?,
                        timeout(rc.timeout_secs),
                    )
                    .map_err(external)?,
                ),
            };
            if rc.backend == RemoteOrStub::Stub && !(0.0..=1.0).contains(&rc.flip_rate) {
                return Err(PipelineError::Config(format!("flip_rate {} outside [0, 1]", rc.flip_rate)));
            }
            let out = rater::two_round_agreement(docs, labeler.as_ref());
            let recs = out.records.iter().map(|r| json!(r)).collect();
            (out.kept, out.removed, recs, error_lines(&out.errors), labeler.identity())
        }
    };
    s.count("kept", kept.len());
    s.count("removed", removed.len());
    s.count("errors", errors.len());
    s.parameters = json!({"mode": rc.mode, "rater": identity, "discrepancy_threshold": rc.discrepancy_threshold});
    let output = s.output()?.to_path_buf();
    s.write_docs(output, &kept)?;
    let p = s.sidecar("removed.jsonl")?;
    s.write(p, &removed)?;
    let p = s.sidecar("ratings.jsonl")?;
    s.write(p, &records)?;
    let n_errors = errors.len();
    if n_errors > 0 {
        let p = s.sidecar("errors.jsonl")?;
        s.write(p, &errors)?;
    }
    s.write_rejects(&rejects)?;
    if is_external && n_errors > 0 {
        return Err(PipelineError::External(format!("{n_errors} records failed at the external rater")));
    }
    Ok(())
}

fn run_mix(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let spec = s.cfg.mix_spec()?;
    let buckets = spec.stage.buckets();
    let mut sources = Vec::new();
    let mut invalid = 0;
    let named: Vec<(Option<String>, PathBuf)> = s.inputs.clone();
    if named.len() != buckets.len() {
        return Err(PipelineError::Config(format!(
            "{} stage needs one input per bucket ({}), got {}",
            spec.stage,
            buckets.join(", "),
            named.len()
        )));
    }
    for (k, (name, path)) in named.iter().enumerate() {
        let bucket = name.clone().unwrap_or_else(|| buckets[k].to_string());
        if !buckets.contains(&bucket.as_str()) {
            return Err(PipelineError::Config(format!("unknown bucket '{bucket}' for the {} stage", spec.stage)));
        }
        let (src, rejects) = BucketSource::load(&bucket, path)?;
        invalid += rejects;
        s.count(&format!("source_documents/{bucket}"), src.documents.len());
        sources.push(src);
    }
    let plan = plan_mix(&spec)?;
    let (docs, report) = sample_mix(&sources, &plan, &spec)?;
    s.count("documents", docs.len());
    s.count("tokens", report.realized.values().sum::<u64>() as usize);
    s.count("shortfalls", report.shortfalls.len());
    s.count("invalid_lines", invalid);
    s.parameters = json!({"spec": spec});
    let output = s.output()?.to_path_buf();
    s.write_docs(output, &docs)?;
    let p = s.sidecar("mix.json")?;
    s.write_json(p, &report)
}

fn run_verify(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let spec = s.cfg.mix_spec()?;
    let paths = s.paths()?;
    if paths.len() != 1 {
        return Err(PipelineError::Config("verify takes exactly one input".into()));
    }
    let path = paths[0].to_path_buf();
    let report_path = sidecar(&path, "mix.json");
    let report: Option<MixReport> = if report_path.is_file() { Some(io::read_json(&report_path)?) } else { None };
    let v = verify_mix(&path, &spec, report.as_ref())?;
    s.count("tokens", v.total_tokens as usize);
    s.count("failures", v.failures.len());
    s.parameters = json!({"spec": spec, "mix_report": report_path.is_file().then(|| io::file_name(&report_path))});
    if let Some(out) = s.output.clone() {
        s.write_json(out, &v)?;
    }
    if v.passed {
        Ok(())
    } else {
        Err(PipelineError::Data(format!("mix verification failed: {}", v.failures.join("; "))))
    }
}

fn sniff_kind(path: &Path) -> Result<&'static str, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let first = body.lines().find(|l| !l.trim().is_empty());
    let v: Value = match first {
        Some(l) => serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?,
        None => return Ok("empty"),
    };
    Ok(if v.get("options").is_some() { "objective" } else { "subjective" })
}

fn run_dpo(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let dc = &s.cfg.dpo;
    let judge: Box<dyn Judge> = match dc.judge {
        RemoteOrStub::Stub => Box::new(StubJudge { seed: s.cfg.seed }),
        RemoteOrStub::External => Box::new(
            ExternalJudge::connect(endpoint(&dc.endpoint, "judge", JUDGE_ENDPOINT_ENV)?, timeout(dc.timeout_secs))
                .map_err(external)?,
        ),
    };
    let mut subjective = Vec::new();
    let mut objective = Vec::new();
    let mut invalid = Vec::new();
    for (name, path) in s.inputs.clone() {
        let kind = match name.as_deref() {
            Some(k @ ("subjective" | "objective")) => k,
            Some(other) => return Err(PipelineError::Config(format!("unknown dpo input '{other}'"))),
            None => sniff_kind(&path)?,
        };
        match kind {
            "subjective" => {
                let (r, j) = read_all::<SubjectiveItem>(&path)?;
                subjective.extend(r);
                invalid.extend(j);
            }
            "objective" => {
                let (r, j) = read_all::<ObjectiveQuestion>(&path)?;
                objective.extend(r);
                invalid.extend(j);
            }
            _ => {}
        }
    }
    let subj = dpo::build_subjective_pairs(subjective, judge.as_ref());
    let obj = dpo::build_objective_pairs(objective, s.cfg.seed);
    let mut errors = error_lines(&subj.errors);
    errors.extend(error_lines(&obj.errors));
    let (pairs, counts) = dpo::build_dataset(subj.pairs, obj.pairs, s.cfg.seed);
    s.count("subjective", counts.subjective as usize);
    s.count("objective", counts.objective as usize);
    s.count("total", counts.total as usize);
    s.count("errors", errors.len());
    s.parameters = json!({"judge": judge.identity(), "aggregation": "mean of four dimensions", "tie": "original"});
    let output = s.output()?.to_path_buf();
    s.write(output, &pairs)?;
    let p = s.sidecar("counts.json")?;
    s.write_json(p, &counts)?;
    if !errors.is_empty() {
        let p = s.sidecar("errors.jsonl")?;
        s.write(p, &errors)?;
    }
    s.write_rejects(&invalid)?;
    if dc.judge == RemoteOrStub::External && !subj.errors.is_empty() {
        return Err(PipelineError::External(format!("{} prompts failed at the external judge", subj.errors.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: u64,
    pub tokens: u64,
    pub token_totals: BTreeMap<String, u64>,
    pub files: Vec<DatasetManifest>,
}

fn run_stats(s: &mut Stage<'_>) -> Result<(), PipelineError> {
    let mut report = StatsReport { records: 0, tokens: 0, token_totals: BTreeMap::new(), files: Vec::new() };
    for p in s.paths()? {
        let m = DatasetManifest::scan(p)?;
        report.records += m.record_count;
        report.tokens += m.total_tokens();
        for (k, v) in &m.token_totals {
            *report.token_totals.entry(k.clone()).or_insert(0) += v;
        }
        report.files.push(m);
    }
    s.count("records", report.records as usize);
    s.count("tokens", report.tokens as usize);
    s.parameters = serde_json::to_value(&report).expect("stats serialize");
    if let Some(out) = s.output.clone() {
        s.write_json(out, &report)?;
    }
    Ok(())
}
