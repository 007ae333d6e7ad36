//! Sentence/word counts per rater and corpus term frequencies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::preprocess::TokenizedDoc;
use crate::similarity::Explanation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterLexicalStats {
    pub rater: String,
    /// Non-empty explanations counted.
    pub documents: usize,
    pub mean_sentences: f64,
    pub mean_words: f64,
    pub single_sentence_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalStats {
    pub raters: Vec<RaterLexicalStats>,
    pub documents: usize,
    /// Empty explanations, excluded from every mean.
    pub excluded_empty: usize,
    pub single_sentence_share: f64,
}

/// Sentences are maximal runs ending in `.`, `!` or `?` (or end of text)
/// that contain at least one alphanumeric character.
pub fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?'])
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .count()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn lexical_stats(explanations: &[Explanation]) -> LexicalStats {
    let mut per_rater: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    let mut excluded_empty = 0;
    for e in explanations {
        let words = word_count(&e.text);
        if words == 0 {
            excluded_empty += 1;
            continue;
        }
        let sentences = sentence_count(&e.text).max(1);
        let entry = per_rater.entry(e.rater.as_str()).or_default();
        entry.0 += 1;
        entry.1 += sentences;
        entry.2 += words;
        entry.3 += usize::from(sentences == 1);
    }
    let documents: usize = per_rater.values().map(|v| v.0).sum();
    let singles: usize = per_rater.values().map(|v| v.3).sum();
    LexicalStats {
        raters: per_rater
            .into_iter()
            .map(|(rater, (n, s, w, single))| RaterLexicalStats {
                rater: rater.to_owned(),
                documents: n,
                mean_sentences: s as f64 / n as f64,
                mean_words: w as f64 / n as f64,
                single_sentence_share: single as f64 / n as f64,
            })
            .collect(),
        documents,
        excluded_empty,
        single_sentence_share: if documents == 0 {
            0.0
        } else {
            singles as f64 / documents as f64
        },
    }
}

/// Term counts over preprocessed documents, descending by count then term.
pub fn term_frequencies(docs: &[TokenizedDoc]) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in docs {
        for t in &d.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_owned(), c)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
