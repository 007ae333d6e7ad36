//! Latent Dirichlet Allocation trained by collapsed Gibbs sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TextlabError};
use crate::preprocess::TokenizedDoc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub k: usize,
    /// Symmetric document-topic prior; `None` means `50 / k`.
    pub alpha: Option<f64>,
    /// Symmetric topic-word prior.
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Number of terms kept in `TopicModel::top_terms`.
    pub top_n: usize,
}

impl LdaConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            alpha: None,
            beta: 0.01,
            iterations: 2000,
            seed: 0,
            top_n: 10,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.k as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTerm {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub doc_ids: Vec<String>,
    /// `k x V` topic-word distributions.
    pub phi: Vec<Vec<f64>>,
    /// `D x k` document-topic distributions.
    pub theta: Vec<Vec<f64>>,
    pub top_terms: Vec<Vec<TopicTerm>>,
    /// Analyst-assigned topic labels; never generated.
    pub labels: Vec<Option<String>>,
}

impl TopicModel {
    /// Indices of the `n` highest-weight terms of `topic`; ties break toward
    /// the lower vocabulary index.
    pub fn top_term_indices(&self, topic: usize, n: usize) -> Vec<usize> {
        top_indices(&self.phi[topic], n)
    }

    pub fn set_label(&mut self, topic: usize, label: Option<String>) {
        self.labels[topic] = label;
    }
}

pub(crate) fn top_indices(weights: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Corpus as vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BagCorpus {
    pub vocabulary: Vec<String>,
    pub docs: Vec<Vec<usize>>,
}

impl BagCorpus {
    pub fn from_docs(docs: &[TokenizedDoc]) -> Self {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for d in docs {
            for t in &d.tokens {
                index.entry(t.as_str()).or_insert(0);
            }
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let vocabulary = index.keys().map(|s| (*s).to_owned()).collect();
        let ids = docs
            .iter()
            .map(|d| d.tokens.iter().map(|t| index[t.as_str()]).collect())
            .collect();
        Self {
            vocabulary,
            docs: ids,
        }
    }
}

pub fn lda_train(docs: &[TokenizedDoc], config: LdaConfig) -> Result<TopicModel> {
    let k = config.k;
    if k < 2 {
        return Err(TextlabError::InvalidTopicCount {
            k,
            reason: "need at least 2 topics".into(),
        });
    }
    let corpus = BagCorpus::from_docs(docs);
    let v = corpus.vocabulary.len();
    if docs.is_empty() || v == 0 {
        return Err(TextlabError::EmptyCorpus);
    }
    if k > v {
        return Err(TextlabError::InvalidTopicCount {
            k,
            reason: format!("exceeds vocabulary size {v}"),
        });
    }
    let alpha = config.alpha();
    let beta = config.beta;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(TextlabError::InvalidParameter("priors must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut doc_topic = vec![vec![0usize; k]; corpus.docs.len()];
    let mut topic_word = vec![vec![0usize; v]; k];
    let mut topic_total = vec![0usize; k];
    let mut assignments: Vec<Vec<usize>> = corpus
        .docs
        .iter()
        .enumerate()
        .map(|(d, words)| {
            words
                .iter()
                .map(|&w| {
                    let t = rng.random_range(0..k);
                    doc_topic[d][t] += 1;
                    topic_word[t][w] += 1;
                    topic_total[t] += 1;
                    t
                })
                .collect()
        })
        .collect();

    let v_beta = v as f64 * beta;
    let mut weights = vec![0.0; k];
    for _ in 0..config.iterations {
        for (d, words) in corpus.docs.iter().enumerate() {
            for (i, &w) in words.iter().enumerate() {
                let old = assignments[d][i];
                doc_topic[d][old] -= 1;
                topic_word[old][w] -= 1;
                topic_total[old] -= 1;

                let mut total = 0.0;
                for t in 0..k {
                    let p = (doc_topic[d][t] as f64 + alpha) * (topic_word[t][w] as f64 + beta)
                        / (topic_total[t] as f64 + v_beta);
                    total += p;
                    weights[t] = total;
                }
                let u = rng.random::<f64>() * total;
                let new = weights.iter().position(|&c| u < c).unwrap_or(k - 1);

                assignments[d][i] = new;
                doc_topic[d][new] += 1;
                topic_word[new][w] += 1;
                topic_total[new] += 1;
            }
        }
    }

    let phi: Vec<Vec<f64>> = (0..k)
        .map(|t| normalize((0..v).map(|w| topic_word[t][w] as f64 + beta).collect()))
        .collect();
    let theta: Vec<Vec<f64>> = doc_topic
        .iter()
        .map(|row| normalize(row.iter().map(|&c| c as f64 + alpha).collect()))
        .collect();
    let top_terms = phi
        .iter()
        .map(|row| {
            top_indices(row, config.top_n)
                .into_iter()
                .map(|w| TopicTerm {
                    term: corpus.vocabulary[w].clone(),
                    weight: row[w],
                })
                .collect()
        })
        .collect();

    Ok(TopicModel {
        k,
        alpha,
        beta,
        iterations: config.iterations,
        seed: config.seed,
        vocabulary: corpus.vocabulary,
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        phi,
        theta,
        top_terms,
        labels: vec![None; k],
    })
}

fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    for x in &mut row {
        *x /= s;
    }
    row
}
