//! Run directory layout, stage dependencies and the writer lock.
//!
//! ```text
//! corpus.jsonl  template.txt  raters.json      inputs copied by `run`
//! manifest.json requests.log.jsonl responses/  gateway
//! judgments.jsonl parse_report.json            parse
//! metrics/                                     metrics
//! analysis/                                    analyze
//! audit/events.jsonl audit/sample.csv          audit log and sample sheet
//! report/                                      report
//! .lock                                        held by the single writer
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{self, PromptTemplate, Scenario};
use crate::judgment::Judgment;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TEMPLATE_FILE: &str = "template.txt";
pub const RATERS_FILE: &str = "raters.json";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const PARSE_REPORT_FILE: &str = "parse_report.json";
pub const METRICS_DIR: &str = "metrics";
pub const ANALYSIS_DIR: &str = "analysis";
pub const AUDIT_DIR: &str = "audit";
pub const REPORT_DIR: &str = "report";
pub const LOCK_FILE: &str = ".lock";

pub const AGREEMENT_CSV: &str = "agreement.csv";
pub const AGREEMENT_JSON: &str = "agreement.json";
pub const TRIAGE_JSON: &str = "triage.json";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Run,
    Parse,
    Metrics,
    Analyze,
    Sample,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Run => "run",
            Stage::Parse => "parse",
            Stage::Metrics => "metrics",
            Stage::Analyze => "analyze",
            Stage::Sample => "sample",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("`{stage}` needs output of `{missing}` ({path} not found); run `{missing}` first", stage = .stage.name(), missing = .missing.name())]
    MissingStage { stage: Stage, missing: Stage, path: String },
    #[error("run directory {0} is locked by another writer (remove {0}/.lock if stale)")]
    Locked(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, RunDirError>;

pub fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunDirError {
    let context = context.into();
    move |source| RunDirError::Io { context, source }
}

fn format_err(path: &Path, e: impl ToString) -> RunDirError {
    RunDirError::Format {
        context: format!("reading {}", path.display()),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory name, used as the run id.
    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join(METRICS_DIR).join(file)
    }

    pub fn analysis(&self, file: &str) -> PathBuf {
        self.root.join(ANALYSIS_DIR).join(file)
    }

    pub fn audit(&self, file: &str) -> PathBuf {
        self.root.join(AUDIT_DIR).join(file)
    }

    /// Fail with a named-dependency error unless `rel` exists.
    pub fn require(&self, stage: Stage, missing: Stage, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(RunDirError::MissingStage {
                stage,
                missing,
                path: p.display().to_string(),
            })
        }
    }

    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(io_err(format!("creating {}", self.root.display())))?;
        let path = self.path(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RunDirError::Locked(self.root.display().to_string()))
            }
            Err(e) => Err(RunDirError::Io {
                context: format!("creating {}", path.display()),
                source: e,
            }),
        }
    }

    pub fn load_corpus(&self, stage: Stage) -> Result<Vec<Scenario>> {
        let p = self.require(stage, Stage::Run, CORPUS_FILE)?;
        corpus::load_corpus(&p).map_err(|e| format_err(&p, e))
    }

    pub fn load_template(&self, stage: Stage) -> Result<PromptTemplate> {
        let p = self.require(stage, Stage::Run, TEMPLATE_FILE)?;
        PromptTemplate::load(&p).map_err(|e| format_err(&p, e))
    }

    pub fn load_judgments(&self, stage: Stage) -> Result<Vec<Judgment>> {
        let p = self.require(stage, Stage::Parse, JUDGMENTS_FILE)?;
        read_jsonl(&p)
    }

    pub fn write_judgments(&self, judgments: &[Judgment]) -> Result<()> {
        write_jsonl(&self.path(JUDGMENTS_FILE), judgments)
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Write via a temporary sibling and rename, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text.into_bytes()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunDirError::Format {
                context: format!("{} line {}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
