//! `ethiclens`: pipeline stages as subcommands over one run directory.
//!
//! Every stage reads only what earlier stages stored, so any prefix can be
//! replayed from the directory without network access. Success prints a JSON
//! summary on stdout. Failure prints one JSON object on stderr,
//! `{"error": {"kind": ..., "message": ...}}`, and exits with 2 when an
//! upstream stage is missing, 1 otherwise.

use std::net::SocketAddr;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ethiclens_core::agreement::Thresholds;
use ethiclens_core::analytics::{self, AnalysisConfig};
use ethiclens_core::audit::{self, StratifiedSampleSpec, DEFAULT_TRIAGE_THRESHOLD};
use ethiclens_core::gateway::{self, DefaultProviders, GatewayConfig};
use ethiclens_core::pipeline::{self, PipelineError, RunInputs};
use ethiclens_core::report;
use ethiclens_core::rundir::{self, RunDir, RunDirError, Stage};
use ethiclens_service::{RoleTokens, ServiceConfig};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "ethiclens", version, about = "Ethical-judgment agreement pipeline over a run directory")]
struct Cli {
    /// Run directory holding every stage's inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Send every scenario to every rater and store the replies.
    Run(RunArgs),
    /// Extract structured judgments from the stored replies.
    Parse,
    /// Agreement tables, z-scores, kappa, expert comparison and triage queue.
    Metrics(MetricsArgs),
    /// Explanation similarity, projections, topics and lexical statistics.
    Analyze(AnalyzeArgs),
    /// Draw the stratified alignment sample, or score a filled-in sheet.
    Sample(SampleArgs),
    /// Write the publishable report directory.
    Report,
    /// Serve the review API over the runs next to (or under) the run directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario corpus (JSON lines). Defaults to the copy in the run directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Prompt template with one `{SCENARIO}` placeholder.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Raters file (JSON array). Relative local and mock paths resolve against its directory.
    #[arg(long)]
    raters: Option<PathBuf>,
    /// Never contact the network; uncached remote cells are skipped.
    #[arg(long)]
    offline: bool,
    /// Requests in flight per rater.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// Lower bound of the strong agreement category.
    #[arg(long, default_value_t = Thresholds::default().strong)]
    strong: f64,
    /// Lower bound of the fair agreement category.
    #[arg(long, default_value_t = Thresholds::default().fair)]
    fair: f64,
}

impl ThresholdArgs {
    fn thresholds(&self) -> Result<Thresholds, CliError> {
        if !(self.fair <= self.strong && self.fair.is_finite() && self.strong.is_finite()) {
            return Err(CliError::usage("--fair must not exceed --strong"));
        }
        Ok(Thresholds {
            strong: self.strong,
            fair: self.fair,
        })
    }
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Scenarios with combined z below this are queued for review.
    #[arg(long, default_value_t = DEFAULT_TRIAGE_THRESHOLD, allow_negative_numbers = true)]
    triage_threshold: f64,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Topic counts scanned for coherence, e.g. `2..15` or `2-15`.
    #[arg(long, default_value = "2..15", value_parser = parse_range)]
    k_range: RangeInclusive<usize>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    tsne_iterations: Option<usize>,
    #[arg(long)]
    lda_iterations: Option<usize>,
    /// Minimum document frequency for TF-IDF terms.
    #[arg(long)]
    min_df: Option<usize>,
    #[arg(long)]
    no_similarity: bool,
    #[arg(long)]
    no_projections: bool,
    #[arg(long)]
    no_topics: bool,
    #[arg(long)]
    no_lexical: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Raters per theory stratum.
    #[arg(long, default_value_t = 6)]
    models: usize,
    /// Scenarios per theory stratum.
    #[arg(long, default_value_t = 10)]
    scenarios: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score a filled-in sample sheet instead of drawing a new sample.
    #[arg(long, requires = "annotator")]
    score: Option<PathBuf>,
    #[arg(long)]
    annotator: Option<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of runs; defaults to the parent of `--run-dir`.
    #[arg(long)]
    runs_root: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRIAGE_THRESHOLD, allow_negative_numbers = true)]
    triage_threshold: f64,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| format!("expected LOW..HIGH, got {s:?}"))?;
    let lo: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let hi: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if lo < 1 || lo > hi {
        return Err(format!("empty or invalid range {lo}..{hi}"));
    }
    Ok(lo..=hi)
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
    dependency: bool,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            dependency: false,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self {
            kind: e.kind(),
            dependency: e.is_dependency(),
            message: e.to_string(),
        }
    }
}

impl From<RunDirError> for CliError {
    fn from(e: RunDirError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<audit::AuditError> for CliError {
    fn from(e: audit::AuditError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<analytics::AnalyticsError> for CliError {
    fn from(e: analytics::AnalyticsError) -> Self {
        PipelineError::from(e).into()
    }
}

/// Named-dependency error for stages invoked on a directory that was never run.
fn require_run_dir(run: &RunDir, stage: Stage) -> Result<(), CliError> {
    if run.root().is_dir() {
        return Ok(());
    }
    Err(RunDirError::MissingStage {
        stage,
        missing: Stage::Run,
        path: run.path(gateway::MANIFEST_FILE).display().to_string(),
    }
    .into())
}

fn raters_base(raters: Option<&Path>, run: &RunDir) -> PathBuf {
    match raters {
        Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        None => run.root().to_path_buf(),
    }
}

fn execute(cli: Cli) -> Result<Value, CliError> {
    let run = RunDir::new(&cli.run_dir);
    match cli.command {
        Command::Serve(args) => return serve(&cli.run_dir, args),
        Command::Run(_) => {}
        Command::Parse => require_run_dir(&run, Stage::Parse)?,
        Command::Metrics(_) => require_run_dir(&run, Stage::Metrics)?,
        Command::Analyze(_) => require_run_dir(&run, Stage::Analyze)?,
        Command::Sample(_) => require_run_dir(&run, Stage::Sample)?,
        Command::Report => require_run_dir(&run, Stage::Report)?,
    }
    let _lock = run.lock()?;
    match cli.command {
        Command::Run(args) => {
            let inputs = RunInputs {
                corpus: args.corpus.as_deref(),
                template: args.template.as_deref(),
                raters: args.raters.as_deref(),
            };
            let config = GatewayConfig {
                parallelism: args.parallelism,
                max_retries: args.max_retries,
                offline: args.offline,
                ..GatewayConfig::default()
            };
            let factory = DefaultProviders::new(raters_base(args.raters.as_deref(), &run));
            let m = pipeline::run_stage(&run, &inputs, &factory, &config)?;
            Ok(json!({
                "stage": "run",
                "run_id": m.run_id,
                "cells": m.cells.len(),
                "ok": m.count(gateway::CellStatus::Ok),
                "failed": m.count(gateway::CellStatus::Failed),
                "skipped": m.count(gateway::CellStatus::Skipped),
            }))
        }
        Command::Parse => {
            let r = pipeline::parse_stage(&run)?;
            Ok(json!({
                "stage": "parse",
                "total": r.report.total,
                "parsed": r.report.parsed,
                "failed": r.report.failed,
                "missing": r.missing.len(),
            }))
        }
        Command::Metrics(args) => {
            let out = pipeline::metrics_stage(&run, args.thresholds.thresholds()?, args.triage_threshold)?;
            Ok(json!({
                "stage": "metrics",
                "scenarios": out.llm.summary.scenarios,
                "mean_tcr": out.llm.summary.mean_tcr,
                "mean_bar": out.llm.summary.mean_bar,
                "kappa_theory": out.llm.kappa_theory.as_ref().map(|k| k.kappa),
                "kappa_verdict": out.llm.kappa_verdict.as_ref().map(|k| k.kappa),
                "experts": out.experts.is_some(),
                "open_triage_items": audit::open_items(&out.triage).len(),
            }))
        }
        Command::Analyze(args) => {
            let d = AnalysisConfig::default();
            let config = AnalysisConfig {
                seed: args.seed,
                k_range: args.k_range,
                perplexity: args.perplexity.unwrap_or(d.perplexity),
                tsne_iterations: args.tsne_iterations.unwrap_or(d.tsne_iterations),
                lda_iterations: args.lda_iterations.unwrap_or(d.lda_iterations),
                min_df: args.min_df.unwrap_or(d.min_df),
                similarity: !args.no_similarity,
                projections: !args.no_projections,
                topics: !args.no_topics,
                lexical: !args.no_lexical,
                ..d
            };
            let meta = analytics::analyze(&run, &config)?;
            Ok(json!({
                "stage": "analyze",
                "documents": meta.documents,
                "files": meta.files,
                "skipped": meta.skipped,
            }))
        }
        Command::Sample(args) => match args.score {
            Some(sheet) => {
                let annotator = args.annotator.unwrap_or_default();
                let text = std::fs::read_to_string(&sheet)
                    .map_err(|e| CliError::usage(format!("reading {}: {e}", sheet.display())))?;
                let records = audit::read_alignment_sheet(&text, &annotator)?;
                let rate = audit::alignment_rate(&records)?;
                let out = json!({
                    "annotator": annotator,
                    "records": records.len(),
                    "aligned": records.iter().filter(|r| r.aligned).count(),
                    "alignment_rate": rate,
                });
                let name = format!("alignment_{}.json", gateway::rater_slug(&annotator));
                rundir::write_json(&run.audit(&name), &out)?;
                Ok(json!({"stage": "sample", "file": format!("audit/{name}"), "alignment_rate": rate}))
            }
            None => {
                let spec = StratifiedSampleSpec {
                    n_models: args.models,
                    n_scenarios: args.scenarios,
                    seed: args.seed,
                };
                let sample = pipeline::sample_stage(&run, spec)?;
                Ok(json!({"stage": "sample", "size": sample.len(), "sheet": format!("audit/{}", audit::SAMPLE_CSV)}))
            }
        },
        Command::Report => {
            let index = report::emit(&run)?;
            Ok(json!({
                "stage": "report",
                "files": index.files.len() + 1,
                "skipped": index.skipped,
            }))
        }
        Command::Serve(_) => unreachable!("handled above"),
    }
}

fn serve(run_dir: &Path, args: ServeArgs) -> Result<Value, CliError> {
    let runs_root = match args.runs_root {
        Some(r) => r,
        None => ethiclens_service::split_run_path(run_dir)
            .map(|(root, _)| root)
            .ok_or_else(|| CliError::usage("cannot derive --runs-root from --run-dir"))?,
    };
    let token = |var: &str| std::env::var(var).ok().filter(|v| !v.is_empty());
    let tokens = RoleTokens {
        expert: token("ETHICLENS_EXPERT_TOKEN"),
        reviewer: token("ETHICLENS_REVIEWER_TOKEN"),
        observer: token("ETHICLENS_OBSERVER_TOKEN"),
    };
    if tokens.expert.is_none() && tokens.reviewer.is_none() && tokens.observer.is_none() {
        return Err(CliError::usage(
            "set at least one of ETHICLENS_EXPERT_TOKEN, ETHICLENS_REVIEWER_TOKEN, ETHICLENS_OBSERVER_TOKEN",
        ));
    }
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port)
        .parse()
        .map_err(|e| CliError::usage(format!("bind address: {e}")))?;
    let config = ServiceConfig {
        runs_root,
        tokens,
        thresholds: args.thresholds.thresholds()?,
        triage_threshold: args.triage_threshold,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::usage(format!("starting runtime: {e}")))?;
    eprintln!("{}", json!({"listening": addr.to_string()}));
    runtime
        .block_on(ethiclens_service::serve(config, addr))
        .map_err(|e| CliError {
            kind: "serve",
            message: e.to_string(),
            dependency: false,
        })?;
    Ok(json!({"stage": "serve", "stopped": true}))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind, "message": e.message}}));
            ExitCode::from(if e.dependency { 2 } else { 1 })
        }
    }
}
