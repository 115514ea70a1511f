use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use curate::pipeline::{self, PipelineConfig, PipelineError, RunRequest, Subcommand};

/// Corpus curation pipeline. Each subcommand runs one stage from files to files.
#[derive(Parser)]
#[command(name = "curate", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Rule-based cleaning: length, symbol ratio, lexicon and pattern rules.
    Filter(Common),
    /// Exact and MinHash near-duplicate removal.
    Dedup(Common),
    /// Multi-turn dialogue selection by conditioned/direct loss ratio.
    Confilter(Common),
    /// Single-turn complexity x quality selection.
    Select(Common),
    /// Double-scoring or two-round label agreement filter.
    Rate(Common),
    /// Token-exact mixing of buckets (inputs as bucket=path).
    Mix(Common),
    /// Preference pairs (inputs as subjective=path / objective=path).
    Dpo(Common),
    /// Recount a mixed dataset against the configured ratios.
    Verify(Common),
    /// Record and token counts of JSONL files.
    Stats(Common),
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads inside the stage; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// JSONL inputs; `mix` and `dpo` accept `name=path`.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<String>,
    /// Main output file; sidecars and the run manifest are written next to it.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, env = pipeline::SCORER_ENDPOINT_ENV)]
    scorer_endpoint: Option<String>,
    #[arg(long, env = pipeline::RATER_ENDPOINT_ENV)]
    rater_endpoint: Option<String>,
    #[arg(long, env = pipeline::JUDGE_ENDPOINT_ENV)]
    judge_endpoint: Option<String>,
}

impl Command {
    fn split(self) -> (Subcommand, Common) {
        match self {
            Command::Filter(c) => (Subcommand::Filter, c),
            Command::Dedup(c) => (Subcommand::Dedup, c),
            Command::Confilter(c) => (Subcommand::Confilter, c),
            Command::Select(c) => (Subcommand::Select, c),
            Command::Rate(c) => (Subcommand::Rate, c),
            Command::Mix(c) => (Subcommand::Mix, c),
            Command::Dpo(c) => (Subcommand::Dpo, c),
            Command::Verify(c) => (Subcommand::Verify, c),
            Command::Stats(c) => (Subcommand::Stats, c),
        }
    }
}

fn config(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let endpoints = [
        (pipeline::SCORER_ENDPOINT_ENV, c.scorer_endpoint.clone()),
        (pipeline::RATER_ENDPOINT_ENV, c.rater_endpoint.clone()),
        (pipeline::JUDGE_ENDPOINT_ENV, c.judge_endpoint.clone()),
    ];
    cfg.apply_env(|key| endpoints.iter().find(|(k, _)| *k == key).and_then(|(_, v)| v.clone()));
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (subcommand, common) = cli.command.split();
    let result = config(&common).and_then(|cfg| {
        pipeline::run(&cfg, &RunRequest { subcommand, inputs: common.input.clone(), output: common.output.clone() })
    });
    match result {
        Ok(manifest) => {
            let counts: Vec<String> = manifest.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            eprintln!("{subcommand}: {}", counts.join(" "));
            if subcommand == Subcommand::Stats && common.output.is_none() {
                println!("{}", manifest.parameters);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("curate {subcommand}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
