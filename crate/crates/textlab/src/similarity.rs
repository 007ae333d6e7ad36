//! Per-scenario and per-rater lexical similarity of explanations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::preprocess::Preprocessor;
use crate::tfidf::{cosine, tfidf, DocVector, TfidfConfig};

/// One rater's explanation for one scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub rater: String,
    pub scenario_id: String,
    pub text: String,
}

impl Explanation {
    pub fn new(rater: impl Into<String>, scenario_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            rater: rater.into(),
            scenario_id: scenario_id.into(),
            text: text.into(),
        }
    }

    /// Document id used in exports: `rater::scenario`.
    pub fn doc_id(&self) -> String {
        format!("{}::{}", self.rater, self.scenario_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSimilarity {
    pub scenario_id: String,
    /// Mean cosine over all unordered rater pairs.
    pub mean: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub scenarios: Vec<ScenarioSimilarity>,
    /// Scenarios with fewer than two explanations.
    pub omitted: Vec<String>,
    pub global_mean: Option<f64>,
    pub global_min: Option<f64>,
    pub global_max: Option<f64>,
    /// Row/column labels of `matrix`, sorted.
    pub raters: Vec<String>,
    /// Rater x rater mean similarity over shared scenarios; unit diagonal.
    pub matrix: Vec<Vec<f64>>,
}

/// Vectorize every explanation against one global TF-IDF model, then average
/// pairwise cosines within each scenario and across each rater pair.
pub fn similarity_profile(
    explanations: &[Explanation],
    preprocessor: &Preprocessor,
    config: TfidfConfig,
) -> Result<SimilarityProfile> {
    let docs = preprocessor.preprocess_corpus(explanations.iter().map(|e| (e.doc_id(), e.text.as_str())));
    let model = tfidf(&docs, config)?;

    let mut by_scenario: BTreeMap<&str, Vec<(&str, &DocVector)>> = BTreeMap::new();
    for (e, v) in explanations.iter().zip(&model.vectors) {
        by_scenario
            .entry(e.scenario_id.as_str())
            .or_default()
            .push((e.rater.as_str(), v));
    }

    let raters: Vec<String> = explanations
        .iter()
        .map(|e| e.rater.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rater_index: BTreeMap<&str, usize> = raters.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let n = raters.len();
    let mut sums = vec![vec![0.0; n]; n];
    let mut counts = vec![vec![0usize; n]; n];

    let mut scenarios = Vec::new();
    let mut omitted = Vec::new();
    for (sid, members) in &by_scenario {
        if members.len() < 2 {
            omitted.push((*sid).to_owned());
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                let c = cosine(members[i].1, members[j].1);
                total += c;
                pairs += 1;
                let (a, b) = (rater_index[members[i].0], rater_index[members[j].0]);
                if a != b {
                    sums[a][b] += c;
                    sums[b][a] += c;
                    counts[a][b] += 1;
                    counts[b][a] += 1;
                }
            }
        }
        scenarios.push(ScenarioSimilarity {
            scenario_id: (*sid).to_owned(),
            mean: total / pairs as f64,
            pairs,
        });
    }

    let matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if counts[i][j] == 0 {
                        0.0
                    } else {
                        sums[i][j] / counts[i][j] as f64
                    }
                })
                .collect()
        })
        .collect();

    let means: Vec<f64> = scenarios.iter().map(|s| s.mean).collect();
    let (global_mean, global_min, global_max) = if means.is_empty() {
        (None, None, None)
    } else {
        (
            Some(means.iter().sum::<f64>() / means.len() as f64),
            means.iter().copied().reduce(f64::min),
            means.iter().copied().reduce(f64::max),
        )
    };

    Ok(SimilarityProfile {
        scenarios,
        omitted,
        global_mean,
        global_min,
        global_max,
        raters,
        matrix,
    })
}
