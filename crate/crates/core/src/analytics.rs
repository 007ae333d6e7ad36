//! Explanation text analytics over a run's judgments.
//!
//! Files written to `analysis/`:
//!
//! - `similarity.json`, `similarity_matrix.csv` (square rater x rater matrix)
//! - `pca.csv`, `tsne.csv` (`doc_id,x,y`), `projections.json` (diagnostics)
//! - `coherence.csv`, `topics.json`
//! - `term_frequencies.csv`, `lexical.json`
//! - `meta.json`: configuration, stopword hash, coherence metric, skipped sections
//!
//! Topic labels are never generated. An optional `analysis/topic_labels.json`
//! (`{"<topic index>": "label"}`) written by an analyst is merged into
//! `topics.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use ethiclens_textlab::{
    coherence::COHERENCE_METRIC, coherence_scan, lexical_stats, pca, similarity_profile, term_frequencies, tfidf,
    tsne, CoherenceConfig, Explanation, LdaConfig, Preprocessor, Projection2D, TextlabError, TfidfConfig,
    TsneConfig,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::csv_field;
use crate::judgment::Judgment;
use crate::rundir::{self, RunDir, RunDirError, Stage, ANALYSIS_DIR};

pub const TOPIC_LABELS_FILE: &str = "topic_labels.json";

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error(transparent)]
    RunDir(#[from] RunDirError),
    #[error("text analytics: {0}")]
    Textlab(#[from] TextlabError),
    #[error("no judgments with explanations to analyze")]
    Empty,
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub seed: u64,
    pub k_range: RangeInclusive<usize>,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub lda_iterations: usize,
    pub lda_beta: f64,
    /// `None` means `50 / k`.
    pub lda_alpha: Option<f64>,
    pub min_df: usize,
    pub coherence_window: usize,
    pub top_n: usize,
    pub similarity: bool,
    pub projections: bool,
    pub topics: bool,
    pub lexical: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let lda = LdaConfig::new(2);
        let coh = CoherenceConfig::default();
        Self {
            seed: 0,
            k_range: 2..=15,
            perplexity: TsneConfig::default().perplexity,
            tsne_iterations: TsneConfig::default().iterations,
            lda_iterations: lda.iterations,
            lda_beta: lda.beta,
            lda_alpha: None,
            min_df: TfidfConfig::default().min_df,
            coherence_window: coh.window,
            top_n: coh.top_n,
            similarity: true,
            projections: true,
            topics: true,
            lexical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSection {
    pub section: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMeta {
    pub config: AnalysisConfig,
    pub documents: usize,
    pub stopword_hash: String,
    pub coherence_metric: String,
    pub files: Vec<String>,
    pub skipped: Vec<SkippedSection>,
}

#[derive(Serialize)]
struct TopicsExport<'a> {
    selected_k: Option<usize>,
    alpha: Option<f64>,
    beta: f64,
    iterations: usize,
    seed: u64,
    topics: Vec<TopicExport<'a>>,
}

#[derive(Serialize)]
struct TopicExport<'a> {
    topic: usize,
    label: Option<&'a str>,
    top_terms: &'a [ethiclens_textlab::lda::TopicTerm],
}

fn projection_csv(p: &Projection2D) -> String {
    let mut out = String::from("doc_id,x,y\n");
    for pt in &p.points {
        writeln!(out, "{},{},{}", csv_field(&pt.doc_id), pt.x, pt.y).expect("writing to a String");
    }
    out
}

/// Run every enabled analysis and write the files into `analysis/`.
pub fn analyze(run: &RunDir, config: &AnalysisConfig) -> Result<AnalysisMeta> {
    let judgments = run.load_judgments(Stage::Analyze)?;
    let files = analyze_judgments(&judgments, config, run.path(ANALYSIS_DIR).as_path())?;
    Ok(files)
}

/// Analysis over explicit judgments, writing into `out_dir`.
pub fn analyze_judgments(judgments: &[Judgment], config: &AnalysisConfig, out_dir: &std::path::Path) -> Result<AnalysisMeta> {
    let mut explanations: Vec<Explanation> = judgments
        .iter()
        .map(|j| Explanation::new(&j.rater, &j.scenario_id, &j.explanation))
        .collect();
    explanations.sort_by(|a, b| (&a.scenario_id, &a.rater).cmp(&(&b.scenario_id, &b.rater)));
    if explanations.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let pre = Preprocessor::new();
    let tf_config = TfidfConfig { min_df: config.min_df };
    let mut files: BTreeMap<&'static str, Vec<u8>> = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut skip = |section: &str, reason: String| {
        skipped.push(SkippedSection {
            section: section.into(),
            reason,
        })
    };

    if config.similarity {
        match similarity_profile(&explanations, &pre, tf_config) {
            Ok(profile) => {
                let mut csv = String::from("rater");
                for r in &profile.raters {
                    csv.push(',');
                    csv.push_str(&csv_field(r));
                }
                csv.push('\n');
                for (r, row) in profile.raters.iter().zip(&profile.matrix) {
                    csv.push_str(&csv_field(r));
                    for v in row {
                        write!(csv, ",{v}").expect("writing to a String");
                    }
                    csv.push('\n');
                }
                files.insert("similarity.json", rundir::to_json_bytes(&profile));
                files.insert("similarity_matrix.csv", csv.into_bytes());
            }
            Err(e) => skip("similarity", e.to_string()),
        }
    } else {
        skip("similarity", "disabled".into());
    }

    let docs = pre.preprocess_corpus(explanations.iter().map(|e| (e.doc_id(), e.text.as_str())));

    if config.projections {
        match tfidf(&docs, tf_config) {
            Ok(model) => {
                let ids: Vec<String> = model.vectors.iter().map(|v| v.doc_id.clone()).collect();
                let rows = model.dense_rows();
                let mut diag = BTreeMap::new();
                match pca(&ids, &rows) {
                    Ok(p) => {
                        files.insert("pca.csv", projection_csv(&p).into_bytes());
                        diag.insert("pca", p.diagnostics);
                    }
                    Err(e) => skip("pca", e.to_string()),
                }
                let tc = TsneConfig {
                    perplexity: config.perplexity,
                    iterations: config.tsne_iterations,
                    seed: config.seed,
                    ..TsneConfig::default()
                };
                match tsne(&ids, &rows, tc) {
                    Ok(p) => {
                        files.insert("tsne.csv", projection_csv(&p).into_bytes());
                        diag.insert("tsne", p.diagnostics);
                    }
                    Err(e) => skip("tsne", e.to_string()),
                }
                if !diag.is_empty() {
                    files.insert("projections.json", rundir::to_json_bytes(&diag));
                }
            }
            Err(e) => skip("projections", e.to_string()),
        }
    } else {
        skip("projections", "disabled".into());
    }

    if config.topics {
        let topic_docs: Vec<_> = docs.iter().filter(|d| !d.empty).cloned().collect();
        let base = LdaConfig {
            k: *config.k_range.start(),
            alpha: config.lda_alpha,
            beta: config.lda_beta,
            iterations: config.lda_iterations,
            seed: config.seed,
            top_n: config.top_n,
        };
        let cc = CoherenceConfig {
            window: config.coherence_window,
            top_n: config.top_n,
        };
        match coherence_scan(&topic_docs, config.k_range.clone(), base, cc) {
            Ok((curve, models)) if curve.selected_k.is_some() => {
                let mut csv = String::from("k,coherence\n");
                for (k, c) in &curve.points {
                    writeln!(csv, "{k},{c}").expect("writing to a String");
                }
                files.insert("coherence.csv", csv.into_bytes());
                files.insert("coherence.json", rundir::to_json_bytes(&curve));
                let labels: BTreeMap<String, String> = rundir::read_json(&out_dir.join(TOPIC_LABELS_FILE)).unwrap_or_default();
                let model = models.iter().find(|m| Some(m.k) == curve.selected_k).expect("selected model");
                let export = TopicsExport {
                    selected_k: curve.selected_k,
                    alpha: Some(model.alpha),
                    beta: model.beta,
                    iterations: model.iterations,
                    seed: model.seed,
                    topics: model
                        .top_terms
                        .iter()
                        .enumerate()
                        .map(|(i, terms)| TopicExport {
                            topic: i,
                            label: labels.get(&i.to_string()).map(String::as_str),
                            top_terms: terms,
                        })
                        .collect(),
                };
                files.insert("topics.json", rundir::to_json_bytes(&export));
            }
            Ok(_) => skip("topics", format!("no topic count in {:?} could be trained", config.k_range)),
            Err(e) => skip("topics", e.to_string()),
        }
    } else {
        skip("topics", "disabled".into());
    }

    if config.lexical {
        files.insert("lexical.json", rundir::to_json_bytes(&lexical_stats(&explanations)));
        let mut csv = String::from("term,count\n");
        for (t, c) in term_frequencies(&docs) {
            writeln!(csv, "{},{c}", csv_field(&t)).expect("writing to a String");
        }
        files.insert("term_frequencies.csv", csv.into_bytes());
    } else {
        skip("lexical", "disabled".into());
    }

    let meta = AnalysisMeta {
        config: config.clone(),
        documents: explanations.len(),
        stopword_hash: pre.stopword_hash(),
        coherence_metric: COHERENCE_METRIC.to_owned(),
        files: files.keys().map(|k| k.to_string()).collect(),
        skipped,
    };
    for (name, bytes) in &files {
        rundir::write_atomic(&out_dir.join(name), bytes)?;
    }
    rundir::write_json(&out_dir.join("meta.json"), &meta)?;
    Ok(meta)
}
