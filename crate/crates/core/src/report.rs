//! Publishable report directory.
//!
//! The report is a pure function of what the run directory stores: no clock
//! readings or host details are written, so an unchanged run yields a
//! byte-identical report. `report/index.json` is written last and lists
//! every other file with its sha256, plus the sections that were skipped.

use std::fs;

use serde::{Deserialize, Serialize};

use crate::agreement::AgreementTable;
use crate::analytics::AnalysisMeta;
use crate::audit::apply_adjudications;
use crate::pipeline::{
    self, ParseStageReport, PipelineError, TriageExport, COMPARISON_JSON, EXPERT_AGREEMENT_CSV, EXPERT_AGREEMENT_JSON,
};
use crate::rundir::{
    self, RunDir, Stage, AGREEMENT_CSV, AGREEMENT_JSON, ANALYSIS_DIR, CORPUS_FILE, PARSE_REPORT_FILE, REPORT_DIR,
    TRIAGE_JSON,
};
use crate::sha256_hex;
use crate::Verdict;

pub const INDEX_FILE: &str = "index.json";

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub section: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub run_id: String,
    pub files: Vec<IndexEntry>,
    pub skipped: Vec<SkippedEntry>,
}

#[derive(Serialize)]
struct KappaSummary<'a> {
    group: &'a str,
    theory: Option<&'a crate::agreement::KappaResult>,
    verdict: Option<&'a crate::agreement::KappaResult>,
    mean_tcr: f64,
    mean_bar: f64,
}

#[derive(Serialize)]
struct AdjudicationExport<'a> {
    id: &'a str,
    scenario_id: &'a str,
    reviewer: &'a str,
    decision: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    theory: Option<crate::Theory>,
    rationale: &'a str,
}

#[derive(Serialize)]
struct ParseSummary<'a> {
    total: usize,
    parsed: usize,
    failed: usize,
    missing: usize,
    policy: &'a str,
}

struct Writer {
    files: Vec<(String, Vec<u8>)>,
    skipped: Vec<SkippedEntry>,
}

impl Writer {
    fn add(&mut self, path: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    fn skip(&mut self, section: &str, reason: impl Into<String>) {
        self.skipped.push(SkippedEntry {
            section: section.into(),
            reason: reason.into(),
        });
    }
}

/// Build `report/` from the stored run. Needs `parse` and `metrics`;
/// analysis and expert sections are included when present.
pub fn emit(run: &RunDir) -> Result<ReportIndex> {
    run.require(Stage::Report, Stage::Parse, rundir::JUDGMENTS_FILE)?;
    let agreement_json = run.require(Stage::Report, Stage::Metrics, &format!("{}/{AGREEMENT_JSON}", rundir::METRICS_DIR))?;
    let llm: AgreementTable = rundir::read_json(&agreement_json)?;
    let mut w = Writer {
        files: Vec::new(),
        skipped: Vec::new(),
    };

    w.add(AGREEMENT_CSV, fs::read(run.metrics(AGREEMENT_CSV)).map_err(rundir::io_err("reading agreement.csv"))?);
    w.add(AGREEMENT_JSON, rundir::to_json_bytes(&llm));
    let mut kappa = vec![KappaSummary {
        group: "models",
        theory: llm.kappa_theory.as_ref(),
        verdict: llm.kappa_verdict.as_ref(),
        mean_tcr: llm.summary.mean_tcr,
        mean_bar: llm.summary.mean_bar,
    }];

    let parse_path = run.path(PARSE_REPORT_FILE);
    if parse_path.exists() {
        let p: ParseStageReport = rundir::read_json(&parse_path)?;
        w.add(
            "parse_summary.json",
            rundir::to_json_bytes(&ParseSummary {
                total: p.report.total,
                parsed: p.report.parsed,
                failed: p.report.failed.len(),
                missing: p.missing.len(),
                policy: &p.report.policy,
            }),
        );
    }

    let store = if run.path(CORPUS_FILE).exists() {
        Some(pipeline::open_audit_store(run)?)
    } else {
        None
    };

    let experts: Option<AgreementTable> = if run.metrics(EXPERT_AGREEMENT_JSON).exists() {
        Some(rundir::read_json(&run.metrics(EXPERT_AGREEMENT_JSON))?)
    } else {
        None
    };
    match &experts {
        Some(e) => {
            w.add(EXPERT_AGREEMENT_CSV, e.to_csv().into_bytes());
            w.add(EXPERT_AGREEMENT_JSON, rundir::to_json_bytes(e));
            kappa.push(KappaSummary {
                group: "experts",
                theory: e.kappa_theory.as_ref(),
                verdict: e.kappa_verdict.as_ref(),
                mean_tcr: e.summary.mean_tcr,
                mean_bar: e.summary.mean_bar,
            });
        }
        None => w.skip("experts", "no expert responses in the audit log"),
    }
    if run.metrics(COMPARISON_JSON).exists() {
        w.add(COMPARISON_JSON, fs::read(run.metrics(COMPARISON_JSON)).map_err(rundir::io_err("reading comparison.json"))?);
    } else {
        w.skip("comparison", "needs expert and model tables over the same scenarios");
    }
    w.add("kappa.json", rundir::to_json_bytes(&kappa));

    let triage_path = run.metrics(TRIAGE_JSON);
    if triage_path.exists() {
        let mut t: TriageExport = rundir::read_json(&triage_path)?;
        let adjudications = store.as_ref().map(|s| s.adjudications()).unwrap_or_default();
        apply_adjudications(&mut t.items, &adjudications);
        w.add(TRIAGE_JSON, rundir::to_json_bytes(&t));
        if !adjudications.is_empty() {
            let export: Vec<AdjudicationExport<'_>> = adjudications
                .iter()
                .map(|a| AdjudicationExport {
                    id: &a.id,
                    scenario_id: &a.scenario_id,
                    reviewer: &a.reviewer,
                    decision: a.decision,
                    theory: a.theory,
                    rationale: &a.rationale,
                })
                .collect();
            w.add("adjudications.json", rundir::to_json_bytes(&export));
        }
    }

    let meta_path = run.analysis("meta.json");
    if meta_path.exists() {
        let meta: AnalysisMeta = rundir::read_json(&meta_path)?;
        for f in meta.files.iter().chain(std::iter::once(&"meta.json".to_string())) {
            let bytes = fs::read(run.analysis(f)).map_err(rundir::io_err(format!("reading analysis/{f}")))?;
            w.add(format!("{ANALYSIS_DIR}/{f}"), bytes);
        }
        for s in &meta.skipped {
            w.skip(&format!("analysis.{}", s.section), s.reason.clone());
        }
    } else {
        w.skip("analysis", "`analyze` has not been run");
    }

    let dir = run.path(REPORT_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(rundir::io_err(format!("clearing {}", dir.display())))?;
    }
    w.files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::with_capacity(w.files.len());
    for (path, bytes) in &w.files {
        rundir::write_atomic(&dir.join(path), bytes)?;
        entries.push(IndexEntry {
            path: path.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }
    let index = ReportIndex {
        run_id: run.id(),
        files: entries,
        skipped: w.skipped,
    };
    rundir::write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}
