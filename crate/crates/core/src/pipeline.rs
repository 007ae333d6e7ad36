//! Stage functions over a run directory, shared by the CLI and the service.
//!
//! Each stage reads only what earlier stages stored and rewrites its own
//! outputs, so any stage can be repeated and any prefix of the pipeline can
//! be replayed offline from the directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{self, AgreementError, AgreementTable, ComparisonReport, Thresholds};
use crate::audit::{self, AuditError, AuditStore, JudgmentRef, StratifiedSampleSpec, TriageItem};
use crate::corpus::{self, CorpusError, PromptTemplate, Scenario};
use crate::gateway::{self, GatewayConfig, GatewayError, MissingCell, ProviderFactory, RaterKind, RunManifest};
use crate::judgment::Judgment;
use crate::parser::{self, ParseReport};
use crate::rundir::{
    self, RunDir, RunDirError, Stage, AGREEMENT_CSV, AGREEMENT_JSON, AUDIT_DIR, CORPUS_FILE, PARSE_REPORT_FILE,
    RATERS_FILE, TEMPLATE_FILE, TRIAGE_JSON,
};

pub const EXPERT_AGREEMENT_CSV: &str = "expert_agreement.csv";
pub const EXPERT_AGREEMENT_JSON: &str = "expert_agreement.json";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const SAMPLE_JSON: &str = "sample.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    RunDir(#[from] RunDirError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
}

impl PipelineError {
    /// True when an upstream stage has not been run.
    pub fn is_dependency(&self) -> bool {
        matches!(
            self,
            PipelineError::RunDir(RunDirError::MissingStage { .. })
                | PipelineError::Gateway(GatewayError::NoManifest(_))
                | PipelineError::Analytics(crate::analytics::AnalyticsError::RunDir(RunDirError::MissingStage { .. }))
        )
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        if self.is_dependency() {
            return "missing_stage";
        }
        match self {
            PipelineError::RunDir(RunDirError::Locked(_)) => "locked",
            PipelineError::RunDir(_) => "run_dir",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Gateway(_) => "gateway",
            PipelineError::Agreement(_) => "agreement",
            PipelineError::Audit(_) => "audit",
            PipelineError::Analytics(_) => "analytics",
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Inputs for the `run` stage. Absent paths fall back to the copies already
/// stored in the run directory.
#[derive(Debug, Clone, Default)]
pub struct RunInputs<'a> {
    pub corpus: Option<&'a Path>,
    pub template: Option<&'a Path>,
    pub raters: Option<&'a Path>,
}

fn copy_input(run: &RunDir, name: &str, bytes: &[u8]) -> Result<()> {
    rundir::write_atomic(&run.path(name), bytes)?;
    Ok(())
}

/// Copy the inputs into the run directory and execute every cell.
pub fn run_stage(
    run: &RunDir,
    inputs: &RunInputs<'_>,
    factory: &dyn ProviderFactory,
    config: &GatewayConfig,
) -> Result<RunManifest> {
    let corpus = match inputs.corpus {
        Some(p) => corpus::load_corpus(p)?,
        None => run.load_corpus(Stage::Run)?,
    };
    let template = match inputs.template {
        Some(p) => PromptTemplate::load(p)?,
        None if run.path(TEMPLATE_FILE).exists() => run.load_template(Stage::Run)?,
        None => PromptTemplate::default_template(),
    };
    let raters_path = match inputs.raters {
        Some(p) => p.to_path_buf(),
        None => run.require(Stage::Run, Stage::Run, RATERS_FILE)?,
    };
    let raters = gateway::load_raters(&raters_path)?;
    copy_input(run, CORPUS_FILE, corpus::to_jsonl(&corpus).as_bytes())?;
    copy_input(run, TEMPLATE_FILE, template.body().as_bytes())?;
    copy_input(run, RATERS_FILE, &rundir::to_json_bytes(&raters))?;
    Ok(gateway::execute_run(run.root(), &corpus, &template, &raters, factory, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseStageReport {
    #[serde(flatten)]
    pub report: ParseReport,
    /// Manifest cells with no stored reply (failed, skipped or offline).
    pub missing: Vec<MissingCell>,
}

/// Parse every stored reply into `judgments.jsonl`.
pub fn parse_stage(run: &RunDir) -> Result<ParseStageReport> {
    if !run.path(gateway::MANIFEST_FILE).exists() {
        return Err(RunDirError::MissingStage {
            stage: Stage::Parse,
            missing: Stage::Run,
            path: run.path(gateway::MANIFEST_FILE).display().to_string(),
        }
        .into());
    }
    let set = gateway::replay_from_cache(run.root())?;
    let (judgments, report) = parser::parse_responses(&set.responses);
    run.write_judgments(&judgments)?;
    let out = ParseStageReport {
        report,
        missing: set.missing,
    };
    rundir::write_json(&run.path(PARSE_REPORT_FILE), &out)?;
    Ok(out)
}

/// Raters dropped per scenario: parse failures plus missing non-human cells.
fn excluded_counts(run: &RunDir) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    let path = run.path(PARSE_REPORT_FILE);
    if !path.exists() {
        return Ok(out);
    }
    let report: ParseStageReport = rundir::read_json(&path)?;
    let humans: BTreeSet<String> = gateway::load_manifest(run.root())
        .map(|m| {
            m.raters
                .into_iter()
                .filter(|r| r.kind == RaterKind::Human)
                .map(|r| r.name)
                .collect()
        })
        .unwrap_or_default();
    for f in &report.report.failed {
        *out.entry(f.scenario_id.clone()).or_insert(0) += 1;
    }
    for m in report.missing.iter().filter(|m| !humans.contains(&m.rater)) {
        *out.entry(m.scenario_id.clone()).or_insert(0) += 1;
    }
    Ok(out)
}

pub fn llm_table(run: &RunDir, stage: Stage, thresholds: Thresholds) -> Result<AgreementTable> {
    let judgments = run.load_judgments(stage)?;
    Ok(agreement::agreement_table(&judgments, &excluded_counts(run)?, thresholds)?)
}

pub fn open_audit_store(run: &RunDir) -> Result<AuditStore> {
    let ids: Vec<String> = run.load_corpus(Stage::Metrics)?.into_iter().map(|s| s.id).collect();
    Ok(AuditStore::open(&run.path(AUDIT_DIR), ids)?)
}

/// Expert-group table and its comparison with the model group, when the
/// audit log holds expert responses.
pub fn expert_views(
    llm: &AgreementTable,
    store: &AuditStore,
    thresholds: Thresholds,
) -> Result<(Option<AgreementTable>, Option<ComparisonReport>)> {
    let experts = store.expert_judgments();
    if experts.is_empty() {
        return Ok((None, None));
    }
    let table = agreement::agreement_table(&experts, &BTreeMap::new(), thresholds)?;
    // A comparison needs both groups on the same scenario set.
    let llm_z = llm.z_rows();
    let exp_z = table.z_rows();
    let comparison = match (llm_z, exp_z) {
        (Some(a), Some(b)) => agreement::compare_groups(&a, &b, 0.0).ok(),
        _ => None,
    };
    Ok((Some(table), comparison))
}

/// Triage queue over the model group, with recorded adjudications applied
/// when `store` is given.
pub fn triage(judgments: &[Judgment], llm: &AgreementTable, threshold: f64, store: Option<&AuditStore>) -> Vec<TriageItem> {
    let Some(z) = llm.z_rows() else {
        return Vec::new();
    };
    let tallies = agreement::tally_all(judgments);
    let mut queue = audit::build_triage_queue(&z, &tallies, threshold);
    if let Some(s) = store {
        audit::apply_adjudications(&mut queue, &s.adjudications());
    }
    queue
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageExport {
    pub threshold: f64,
    pub items: Vec<TriageItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsOutput {
    pub llm: AgreementTable,
    pub experts: Option<AgreementTable>,
    pub comparison: Option<ComparisonReport>,
    pub triage: Vec<TriageItem>,
}

/// Agreement tables, expert comparison and the triage queue into `metrics/`.
pub fn metrics_stage(run: &RunDir, thresholds: Thresholds, triage_threshold: f64) -> Result<MetricsOutput> {
    let judgments = run.load_judgments(Stage::Metrics)?;
    let llm = agreement::agreement_table(&judgments, &excluded_counts(run)?, thresholds)?;
    let store = if run.path(CORPUS_FILE).exists() {
        Some(open_audit_store(run)?)
    } else {
        None
    };
    let (experts, comparison) = match &store {
        Some(s) => expert_views(&llm, s, thresholds)?,
        None => (None, None),
    };
    let triage = triage(&judgments, &llm, triage_threshold, store.as_ref());

    let metrics_dir = run.path(rundir::METRICS_DIR);
    if metrics_dir.exists() {
        fs::remove_dir_all(&metrics_dir).map_err(rundir::io_err(format!("clearing {}", metrics_dir.display())))?;
    }
    rundir::write_atomic(&run.metrics(AGREEMENT_CSV), llm.to_csv().as_bytes())?;
    rundir::write_json(&run.metrics(AGREEMENT_JSON), &llm)?;
    rundir::write_json(
        &run.metrics(TRIAGE_JSON),
        &TriageExport {
            threshold: triage_threshold,
            items: triage.clone(),
        },
    )?;
    if let Some(e) = &experts {
        rundir::write_atomic(&run.metrics(EXPERT_AGREEMENT_CSV), e.to_csv().as_bytes())?;
        rundir::write_json(&run.metrics(EXPERT_AGREEMENT_JSON), e)?;
    }
    if let Some(c) = &comparison {
        rundir::write_json(&run.metrics(COMPARISON_JSON), c)?;
    }
    Ok(MetricsOutput {
        llm,
        experts,
        comparison,
        triage,
    })
}

/// Draw the alignment sample and write the annotation sheet.
pub fn sample_stage(run: &RunDir, spec: StratifiedSampleSpec) -> Result<Vec<JudgmentRef>> {
    let judgments = run.load_judgments(Stage::Sample)?;
    let sample = audit::draw_stratified_sample(&judgments, spec)?;
    rundir::write_atomic(
        &run.audit(audit::SAMPLE_CSV),
        audit::sample_sheet_csv(&sample, &judgments).as_bytes(),
    )?;
    rundir::write_json(&run.audit(SAMPLE_JSON), &serde_json::json!({ "spec": spec, "sample": sample }))?;
    Ok(sample)
}

pub fn scenarios(run: &RunDir) -> Result<Vec<Scenario>> {
    Ok(run.load_corpus(Stage::Metrics)?)
}
