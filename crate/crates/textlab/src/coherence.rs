//! Topic coherence by sliding-window NPMI, and topic-count selection.
//!
//! Each document is cut into windows of `window` consecutive tokens (a
//! document shorter than the window is a single window). For a term pair,
//! `NPMI = ln(p(a,b) / (p(a) p(b))) / -ln p(a,b)` with probabilities estimated
//! as the share of windows containing the term(s). Pairs that never co-occur
//! score -1; pairs present in every window score 1. A topic's coherence is the
//! mean NPMI over all pairs of its top terms, and a model's coherence is the
//! mean over its topics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lda::{lda_train, LdaConfig, TopicModel};
use crate::preprocess::TokenizedDoc;

/// Name recorded in outputs for the coherence measure.
pub const COHERENCE_METRIC: &str = "sliding-window NPMI";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceConfig {
    pub window: usize,
    pub top_n: usize,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self { window: 10, top_n: 10 }
    }
}

/// Window occurrence statistics over a reference corpus.
#[derive(Debug, Clone)]
pub struct WindowStats {
    windows: Vec<BTreeSet<String>>,
}

impl WindowStats {
    pub fn new(docs: &[TokenizedDoc], window: usize) -> Self {
        let window = window.max(1);
        let mut windows = Vec::new();
        for d in docs {
            if d.tokens.is_empty() {
                continue;
            }
            if d.tokens.len() <= window {
                windows.push(d.tokens.iter().cloned().collect());
            } else {
                for w in d.tokens.windows(window) {
                    windows.push(w.iter().cloned().collect());
                }
            }
        }
        Self { windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn share(&self, terms: &[&str]) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let hits = self
            .windows
            .iter()
            .filter(|w| terms.iter().all(|t| w.contains(*t)))
            .count();
        hits as f64 / self.windows.len() as f64
    }

    pub fn npmi(&self, a: &str, b: &str) -> f64 {
        let pab = self.share(&[a, b]);
        if pab <= 0.0 {
            return -1.0;
        }
        if pab >= 1.0 {
            return 1.0;
        }
        let pa = self.share(&[a]);
        let pb = self.share(&[b]);
        (pab / (pa * pb)).ln() / -pab.ln()
    }
}

/// Mean NPMI over all pairs of `terms`.
pub fn npmi_coherence(terms: &[String], stats: &WindowStats) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..terms.len() {
        for j in (i + 1)..terms.len() {
            total += stats.npmi(&terms[i], &terms[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Mean topic coherence of a trained model.
pub fn model_coherence(model: &TopicModel, stats: &WindowStats, top_n: usize) -> f64 {
    let per_topic: Vec<f64> = (0..model.k)
        .map(|t| {
            let terms: Vec<String> = model
                .top_term_indices(t, top_n)
                .into_iter()
                .map(|w| model.vocabulary[w].clone())
                .collect();
            npmi_coherence(&terms, stats)
        })
        .collect();
    per_topic.iter().sum::<f64>() / per_topic.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub metric: String,
    pub window: usize,
    pub top_n: usize,
    pub points: BTreeMap<usize, f64>,
    /// Argmax of `points`; ties go to the smallest k.
    pub selected_k: Option<usize>,
}

/// Train one model per `k` (same seed and priors from `base`) and score it.
/// Values of `k` that cannot be trained (for example `k` larger than the
/// vocabulary) are skipped.
pub fn coherence_scan(
    docs: &[TokenizedDoc],
    k_range: impl IntoIterator<Item = usize>,
    base: LdaConfig,
    config: CoherenceConfig,
) -> Result<(CoherenceCurve, Vec<TopicModel>)> {
    let stats = WindowStats::new(docs, config.window);
    let mut points = BTreeMap::new();
    let mut models = Vec::new();
    for k in k_range {
        let cfg = LdaConfig { k, ..base };
        let model = match lda_train(docs, cfg) {
            Ok(m) => m,
            Err(crate::TextlabError::InvalidTopicCount { .. }) => continue,
            Err(e) => return Err(e),
        };
        points.insert(k, model_coherence(&model, &stats, config.top_n));
        models.push(model);
    }
    let mut selected_k = None;
    let mut best = f64::NEG_INFINITY;
    for (&k, &c) in &points {
        if c > best {
            best = c;
            selected_k = Some(k);
        }
    }
    Ok((
        CoherenceCurve {
            metric: COHERENCE_METRIC.to_owned(),
            window: config.window,
            top_n: config.top_n,
            points,
            selected_k,
        },
        models,
    ))
}
