//! TF-IDF vectorization and cosine similarity.
//!
//! `weight(t, d) = tf(t, d) * ln((1 + D) / (1 + df(t)))`, followed by l2
//! normalization of each document vector. `tf` is the raw count of `t` in `d`.
//! A term present in every document therefore gets weight zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TextlabError};
use crate::preprocess::TokenizedDoc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    /// Terms occurring in fewer documents than this are left out of the
    /// vocabulary.
    pub min_df: usize,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self { min_df: 2 }
    }
}

/// Sparse l2-normalized document vector. Entries are `(term index, weight)`
/// sorted by term index, zero weights omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVector {
    pub doc_id: String,
    pub weights: Vec<(usize, f64)>,
    /// Set when the document has no weighted term left.
    pub zero: bool,
}

impl DocVector {
    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, w) in &self.weights {
            out[i] = w;
        }
        out
    }

    pub fn get(&self, term: usize) -> f64 {
        self.weights
            .binary_search_by_key(&term, |(i, _)| *i)
            .map(|pos| self.weights[pos].1)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    /// Sorted vocabulary.
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    pub vectors: Vec<DocVector>,
}

impl TfidfModel {
    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.vocabulary
            .binary_search_by(|t| t.as_str().cmp(term))
            .ok()
    }

    /// Dense row-major matrix of all document vectors.
    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        self.vectors.iter().map(|v| v.to_dense(self.dim())).collect()
    }
}

/// Raw term counts of a document.
pub fn term_counts(doc: &TokenizedDoc) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for t in &doc.tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

pub fn tfidf(docs: &[TokenizedDoc], config: TfidfConfig) -> Result<TfidfModel> {
    if docs.len() < 2 {
        return Err(TextlabError::TooFewDocuments {
            required: 2,
            actual: docs.len(),
        });
    }
    let counts: Vec<BTreeMap<&str, usize>> = docs.iter().map(term_counts).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &counts {
        for term in c.keys() {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    let n_docs = docs.len() as f64;
    let kept: Vec<(&str, usize)> = df
        .into_iter()
        .filter(|(_, d)| *d >= config.min_df)
        .collect();
    let vocabulary: Vec<String> = kept.iter().map(|(t, _)| (*t).to_owned()).collect();
    let idf: Vec<f64> = kept
        .iter()
        .map(|(_, d)| ((1.0 + n_docs) / (1.0 + *d as f64)).ln())
        .collect();
    let index: BTreeMap<&str, usize> = kept.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();

    let vectors = docs
        .iter()
        .zip(&counts)
        .map(|(doc, c)| {
            let mut weights: Vec<(usize, f64)> = c
                .iter()
                .filter_map(|(t, &n)| index.get(t).map(|&i| (i, n as f64 * idf[i])))
                .filter(|(_, w)| *w > 0.0)
                .collect();
            weights.sort_by_key(|(i, _)| *i);
            let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, w) in &mut weights {
                    *w /= norm;
                }
            }
            DocVector {
                doc_id: doc.doc_id.clone(),
                zero: weights.is_empty(),
                weights,
            }
        })
        .collect();

    Ok(TfidfModel {
        vocabulary,
        idf,
        vectors,
    })
}

/// Cosine similarity of two normalized vectors; zero vectors score 0.
pub fn cosine(a: &DocVector, b: &DocVector) -> f64 {
    if a.zero || b.zero {
        return 0.0;
    }
    let (mut i, mut j) = (0, 0);
    let mut dot = 0.0;
    while i < a.weights.len() && j < b.weights.len() {
        let (ta, wa) = a.weights[i];
        let (tb, wb) = b.weights[j];
        match ta.cmp(&tb) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += wa * wb;
                i += 1;
                j += 1;
            }
        }
    }
    dot.clamp(0.0, 1.0)
}
