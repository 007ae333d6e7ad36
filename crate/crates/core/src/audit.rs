//! Human-facing workflows: alignment sampling, triage, expert responses and
//! adjudications.
//!
//! Expert responses and adjudications live in an append-only JSON-lines log
//! (`audit/events.jsonl`). Nothing in this module rewrites model judgments;
//! triage status is derived from the log on every read.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{csv_field, VoteTally, ZRow};
use crate::judgment::{Judgment, Theory, Verdict};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SAMPLE_CSV: &str = "sample.csv";
pub const DEFAULT_TRIAGE_THRESHOLD: f64 = -0.5;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("stratum {theory} has {available} judgments, {required} required")]
    InfeasibleStratum {
        theory: Theory,
        available: usize,
        required: usize,
    },
    #[error("no usable alignment records")]
    NoRecords,
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid entry: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("scenario {scenario_id:?} is not open for adjudication (status {status:?})")]
    NotOpen { scenario_id: String, status: TriageStatus },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    CorruptLog { path: String, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, AuditError>;

// Stratified alignment sample

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedSampleSpec {
    pub n_models: usize,
    pub n_scenarios: usize,
    pub seed: u64,
}

impl StratifiedSampleSpec {
    /// Judgments drawn from each theory stratum.
    pub fn per_stratum(&self) -> usize {
        self.n_models * self.n_scenarios
    }

    pub fn total(&self) -> usize {
        self.per_stratum() * Theory::ALL.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JudgmentRef {
    pub rater: String,
    pub scenario_id: String,
    pub theory: Theory,
}

/// Draw `n_models * n_scenarios` judgments from each theory stratum.
///
/// Each stratum is the set of judgments that chose that theory, ordered by
/// (rater, scenario) before a seeded draw without replacement, so the sample
/// depends only on the judgment set and the seed. The result is sorted by
/// theory, rater, scenario.
pub fn draw_stratified_sample(judgments: &[Judgment], spec: StratifiedSampleSpec) -> Result<Vec<JudgmentRef>> {
    let mut out = Vec::with_capacity(spec.total());
    for (i, theory) in Theory::ALL.into_iter().enumerate() {
        let mut pool: Vec<JudgmentRef> = judgments
            .iter()
            .filter(|j| j.theory == theory)
            .map(|j| JudgmentRef {
                rater: j.rater.clone(),
                scenario_id: j.scenario_id.clone(),
                theory,
            })
            .collect();
        pool.sort();
        let required = spec.per_stratum();
        if pool.len() < required {
            return Err(AuditError::InfeasibleStratum {
                theory,
                available: pool.len(),
                required,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), required).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|k| pool[k].clone()));
    }
    Ok(out)
}

/// Sample sheet for offline annotation. `aligned`, `excluded` and `note` are
/// left blank for the annotator.
pub fn sample_sheet_csv(sample: &[JudgmentRef], judgments: &[Judgment]) -> String {
    let by_key: BTreeMap<(&str, &str), &Judgment> = judgments
        .iter()
        .map(|j| ((j.rater.as_str(), j.scenario_id.as_str()), j))
        .collect();
    let mut out = String::from("rater,scenario_id,theory,verdict,explanation,aligned,excluded,note\n");
    for r in sample {
        let j = by_key.get(&(r.rater.as_str(), r.scenario_id.as_str()));
        out.push_str(&format!(
            "{},{},{},{},{},,,\n",
            csv_field(&r.rater),
            csv_field(&r.scenario_id),
            r.theory,
            j.map(|j| j.verdict.as_str()).unwrap_or(""),
            csv_field(j.map(|j| j.explanation.as_str()).unwrap_or("")),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub rater: String,
    pub scenario_id: String,
    pub annotator: String,
    pub aligned: bool,
    /// Set by the annotator to leave the item out of the rate.
    #[serde(default)]
    pub excluded: bool,
    #[serde(default)]
    pub note: String,
}

/// Share of non-excluded records marked aligned.
pub fn alignment_rate(records: &[AlignmentRecord]) -> Result<f64> {
    let kept: Vec<&AlignmentRecord> = records.iter().filter(|r| !r.excluded).collect();
    if kept.is_empty() {
        return Err(AuditError::NoRecords);
    }
    Ok(kept.iter().filter(|r| r.aligned).count() as f64 / kept.len() as f64)
}

/// Read an annotated sample sheet. Rows with an empty `aligned` cell are
/// skipped; `annotator` names whoever filled the sheet.
pub fn read_alignment_sheet(csv_text: &str, annotator: &str) -> Result<Vec<AlignmentRecord>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| AuditError::Invalid(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AuditError::Invalid(format!("sample sheet lacks column {name:?}")))
    };
    let (rc, sc, ac, ec, nc) = (col("rater")?, col("scenario_id")?, col("aligned")?, col("excluded")?, col("note")?);
    let truthy = |s: &str| -> Result<Option<bool>> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" => Ok(None),
            "1" | "true" | "yes" | "y" => Ok(Some(true)),
            "0" | "false" | "no" | "n" => Ok(Some(false)),
            other => Err(AuditError::Invalid(format!("not a boolean: {other:?}"))),
        }
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| AuditError::Invalid(e.to_string()))?;
        let Some(aligned) = truthy(&row[ac])? else { continue };
        out.push(AlignmentRecord {
            rater: row[rc].to_owned(),
            scenario_id: row[sc].to_owned(),
            annotator: annotator.to_owned(),
            aligned,
            excluded: truthy(&row[ec])?.unwrap_or(false),
            note: row[nc].to_owned(),
        });
    }
    Ok(out)
}

// Triage

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageStatus {
    Open,
    Adjudicated,
    AutoResolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSplit {
    pub n: usize,
    pub theories: BTreeMap<Theory, usize>,
    pub verdicts: BTreeMap<Verdict, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub scenario_id: String,
    pub combined: f64,
    pub split: ModelSplit,
    pub status: TriageStatus,
}

/// Every scenario, `Open` when its combined z is below `threshold`, else
/// `AutoResolved`; sorted ascending by combined z, then id.
pub fn build_triage_queue(z_rows: &[ZRow], tallies: &[VoteTally], threshold: f64) -> Vec<TriageItem> {
    let by_id: BTreeMap<&str, &VoteTally> = tallies.iter().map(|t| (t.scenario_id.as_str(), t)).collect();
    let mut items: Vec<TriageItem> = z_rows
        .iter()
        .map(|z| {
            let split = by_id
                .get(z.scenario_id.as_str())
                .map(|t| ModelSplit {
                    n: t.n,
                    theories: t.theory_counts.clone(),
                    verdicts: t.verdict_counts.clone(),
                })
                .unwrap_or(ModelSplit {
                    n: 0,
                    theories: BTreeMap::new(),
                    verdicts: BTreeMap::new(),
                });
            TriageItem {
                scenario_id: z.scenario_id.clone(),
                combined: z.combined,
                split,
                status: if z.combined < threshold {
                    TriageStatus::Open
                } else {
                    TriageStatus::AutoResolved
                },
            }
        })
        .collect();
    items.sort_by(|a, b| a.combined.total_cmp(&b.combined).then_with(|| a.scenario_id.cmp(&b.scenario_id)));
    items
}

pub fn open_items(queue: &[TriageItem]) -> Vec<&TriageItem> {
    queue.iter().filter(|i| i.status == TriageStatus::Open).collect()
}

/// Close open items that have an adjudication.
pub fn apply_adjudications(queue: &mut [TriageItem], adjudications: &[StoredAdjudication]) {
    let done: BTreeSet<&str> = adjudications.iter().map(|a| a.scenario_id.as_str()).collect();
    for item in queue.iter_mut() {
        if item.status == TriageStatus::Open && done.contains(item.scenario_id.as_str()) {
            item.status = TriageStatus::Adjudicated;
        }
    }
}

// Event log

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertResponse {
    pub expert: String,
    pub scenario_id: String,
    pub theory: Theory,
    pub verdict: Verdict,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adjudication {
    pub scenario_id: String,
    pub reviewer: String,
    pub decision: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<Theory>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredExpertResponse {
    pub id: String,
    pub recorded_at: String,
    #[serde(flatten)]
    pub response: ExpertResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredAdjudication {
    pub id: String,
    pub recorded_at: String,
    #[serde(flatten)]
    pub adjudication: Adjudication,
}

impl std::ops::Deref for StoredAdjudication {
    type Target = Adjudication;
    fn deref(&self) -> &Adjudication {
        &self.adjudication
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditEvent {
    ExpertResponse(StoredExpertResponse),
    Adjudication(StoredAdjudication),
}

/// Single-writer view of a run's audit log. Callers serialize access (the
/// service holds one store per run behind a mutex).
#[derive(Debug)]
pub struct AuditStore {
    path: PathBuf,
    scenarios: BTreeSet<String>,
    events: Vec<AuditEvent>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl AuditStore {
    /// Open (or start) the log at `audit_dir/events.jsonl`.
    pub fn open(audit_dir: &Path, scenario_ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let path = audit_dir.join(EVENTS_FILE);
        let mut events = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|source| AuditError::Io {
                context: format!("reading {}", path.display()),
                source,
            })?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                events.push(serde_json::from_str(line).map_err(|e| AuditError::CorruptLog {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?);
            }
        }
        Ok(Self {
            path,
            scenarios: scenario_ids.into_iter().collect(),
            events,
        })
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn expert_responses(&self) -> Vec<&StoredExpertResponse> {
        self.events
            .iter()
            .filter_map(|e| match e {
                AuditEvent::ExpertResponse(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    pub fn adjudications(&self) -> Vec<StoredAdjudication> {
        self.events
            .iter()
            .filter_map(|e| match e {
                AuditEvent::Adjudication(a) => Some(a.clone()),
                _ => None,
            })
            .collect()
    }

    /// Expert entries as judgments of the human rater group.
    pub fn expert_judgments(&self) -> Vec<Judgment> {
        self.expert_responses()
            .into_iter()
            .map(|r| Judgment {
                rater: r.response.expert.clone(),
                scenario_id: r.response.scenario_id.clone(),
                theory: r.response.theory,
                verdict: r.response.verdict,
                explanation: r.response.explanation.clone(),
                flags: BTreeSet::new(),
            })
            .collect()
    }

    fn check_scenario(&self, id: &str) -> Result<()> {
        if self.scenarios.contains(id) {
            Ok(())
        } else {
            Err(AuditError::UnknownScenario(id.to_owned()))
        }
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:06}", self.events.len() + 1)
    }

    fn append(&mut self, event: AuditEvent) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|source| AuditError::Io {
                context: format!("creating {}", parent.display()),
                source,
            })?;
        }
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        let io = |source| AuditError::Io {
            context: format!("appending to {}", self.path.display()),
            source,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_data().map_err(io)?;
        self.events.push(event);
        Ok(())
    }

    pub fn ingest_expert_response(&mut self, r: ExpertResponse) -> Result<StoredExpertResponse> {
        self.check_scenario(&r.scenario_id)?;
        if r.expert.trim().is_empty() {
            return Err(AuditError::Invalid("expert id is empty".into()));
        }
        if r.explanation.trim().is_empty() {
            return Err(AuditError::Invalid("explanation is empty".into()));
        }
        if self
            .expert_responses()
            .iter()
            .any(|e| e.response.expert == r.expert && e.response.scenario_id == r.scenario_id)
        {
            return Err(AuditError::Conflict(format!(
                "expert {:?} already answered scenario {:?}",
                r.expert, r.scenario_id
            )));
        }
        let stored = StoredExpertResponse {
            id: self.next_id("exp"),
            recorded_at: now(),
            response: r,
        };
        self.append(AuditEvent::ExpertResponse(stored.clone()))?;
        Ok(stored)
    }

    /// Record an adjudication for an item of `queue` (built without
    /// adjudications applied). Only open items can be adjudicated, once.
    pub fn record_adjudication(&mut self, a: Adjudication, queue: &[TriageItem]) -> Result<StoredAdjudication> {
        self.check_scenario(&a.scenario_id)?;
        if a.reviewer.trim().is_empty() {
            return Err(AuditError::Invalid("reviewer id is empty".into()));
        }
        if a.rationale.trim().is_empty() {
            return Err(AuditError::Invalid("rationale is empty".into()));
        }
        if let Some(prev) = self.adjudications().iter().find(|p| p.scenario_id == a.scenario_id) {
            return Err(AuditError::Conflict(format!(
                "scenario {:?} was already adjudicated by {:?} ({})",
                a.scenario_id, prev.reviewer, prev.id
            )));
        }
        let status = queue
            .iter()
            .find(|i| i.scenario_id == a.scenario_id)
            .map(|i| i.status)
            .unwrap_or(TriageStatus::AutoResolved);
        if status != TriageStatus::Open {
            return Err(AuditError::NotOpen {
                scenario_id: a.scenario_id,
                status,
            });
        }
        let stored = StoredAdjudication {
            id: self.next_id("adj"),
            recorded_at: now(),
            adjudication: a,
        };
        self.append(AuditEvent::Adjudication(stored.clone()))?;
        Ok(stored)
    }
}
