//! Tokenization, stopword removal, rule-based lemmatization and bigram merging.
//!
//! The pipeline for a single text is:
//!
//! 1. lower-case;
//! 2. split into maximal runs of letters (internal hyphens are kept, so
//!    `well-being` stays one token; apostrophes are dropped, so `don't` becomes
//!    `dont`); digits and punctuation separate tokens and are discarded;
//! 3. drop stopwords (the shipped list in `assets/stopwords.txt`);
//! 4. lemmatize with [`lemmatize`];
//! 5. drop stopwords again and tokens shorter than two characters.
//!
//! Bigram detection runs over a whole corpus: any adjacent token pair seen at
//! least `min_count` times is merged into `first_second`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords.txt");

/// Default minimum joint count for merging a bigram.
pub const DEFAULT_BIGRAM_MIN_COUNT: usize = 5;

/// A document after preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub tokens: Vec<String>,
    /// Set when preprocessing left no tokens.
    pub empty: bool,
}

impl TokenizedDoc {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<String>) -> Self {
        let empty = tokens.is_empty();
        Self {
            doc_id: doc_id.into(),
            tokens,
            empty,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessor {
    stopwords: HashSet<String>,
    bigrams: Option<BigramDetector>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new()
    }
}

impl Preprocessor {
    /// Preprocessor with the shipped stopword list and bigram merging at
    /// [`DEFAULT_BIGRAM_MIN_COUNT`].
    pub fn new() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS
                .lines()
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(str::to_owned)
                .collect(),
            bigrams: Some(BigramDetector::new(DEFAULT_BIGRAM_MIN_COUNT)),
        }
    }

    pub fn with_stopwords<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.stopwords = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .collect();
        self
    }

    pub fn with_bigrams(mut self, detector: Option<BigramDetector>) -> Self {
        self.bigrams = detector;
        self
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    /// SHA-256 over the sorted stopword list, one word per line.
    pub fn stopword_hash(&self) -> String {
        let sorted: BTreeSet<&str> = self.stopwords.iter().map(String::as_str).collect();
        let mut hasher = Sha256::new();
        for w in sorted {
            hasher.update(w.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Tokens of a single text, without bigram merging.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        raw_tokens(text)
            .into_iter()
            .filter(|t| !self.is_stopword(t))
            .map(|t| lemmatize(&t))
            .filter(|t| t.chars().count() >= 2 && !self.is_stopword(t))
            .collect()
    }

    /// Preprocess a single document. Bigram merging needs corpus counts, so it
    /// is not applied here; see [`Preprocessor::preprocess_corpus`].
    pub fn preprocess(&self, doc_id: impl Into<String>, text: &str) -> TokenizedDoc {
        TokenizedDoc::new(doc_id, self.tokenize(text))
    }

    /// Preprocess a corpus of `(doc_id, text)` pairs, merging frequent bigrams.
    pub fn preprocess_corpus<I, S, T>(&self, docs: I) -> Vec<TokenizedDoc>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut out: Vec<TokenizedDoc> = docs
            .into_iter()
            .map(|(id, text)| self.preprocess(id, text.as_ref()))
            .collect();
        if let Some(detector) = &self.bigrams {
            let pairs = detector.detect(out.iter().map(|d| d.tokens.as_slice()));
            for doc in &mut out {
                doc.tokens = BigramDetector::merge(&pairs, &doc.tokens);
                doc.empty = doc.tokens.is_empty();
            }
        }
        out
    }
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{2018}')
}

/// Lower-cased letter runs; see the module docs for the exact rules.
pub fn raw_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphabetic() {
            current.push(c);
        } else if is_apostrophe(c) {
            continue;
        } else if c == '-'
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
        {
            current.push('-');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

const IRREGULAR: &[(&str, &str)] = &[
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("lives", "life"),
    ("wives", "wife"),
    ("knives", "knife"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("selves", "self"),
];

/// Words ending in `s` that are left untouched.
const S_EXCEPTIONS: &[&str] = &[
    "ethics",
    "physics",
    "politics",
    "economics",
    "news",
    "series",
    "species",
    "means",
    "always",
    "perhaps",
    "whereas",
    "thus",
    "yes",
    "bias",
    "alias",
    "atlas",
    "canvas",
    "lens",
    "various",
    "towards",
    "afterwards",
];

/// Rule-based lemmatizer for English plural nouns and third-person verbs.
///
/// Only `-s` inflections are folded; `-ed` and `-ing` forms are kept as-is.
/// Irregular forms and invariant `-s` words come from fixed tables.
pub fn lemmatize(word: &str) -> String {
    if let Some((_, lemma)) = IRREGULAR.iter().find(|(w, _)| *w == word) {
        return (*lemma).to_owned();
    }
    if word.chars().count() <= 3 || S_EXCEPTIONS.contains(&word) {
        return word.to_owned();
    }
    for keep in ["ss", "us", "is", "ous", "ics"] {
        if word.ends_with(keep) {
            return word.to_owned();
        }
    }
    if let Some(stem) = word.strip_suffix("ies") {
        if word.len() > 4 {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = word.strip_suffix("sses") {
        return format!("{stem}ss");
    }
    for suffix in ["ches", "shes", "xes", "zes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_owned();
        }
    }
    match word.strip_suffix('s') {
        Some(stem) => stem.to_owned(),
        None => word.to_owned(),
    }
}

/// Corpus-level bigram detection by joint count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BigramDetector {
    /// A pair is merged when it occurs adjacently at least this many times.
    pub min_count: usize,
}

impl BigramDetector {
    pub fn new(min_count: usize) -> Self {
        Self { min_count }
    }

    pub fn count_pairs<'a, I>(docs: I) -> BTreeMap<(String, String), usize>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts = BTreeMap::new();
        for doc in docs {
            for w in doc.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn detect<'a, I>(&self, docs: I) -> BTreeSet<(String, String)>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        Self::count_pairs(docs)
            .into_iter()
            .filter(|(_, c)| *c >= self.min_count.max(1))
            .map(|(p, _)| p)
            .collect()
    }

    /// Greedy left-to-right merge of detected pairs.
    pub fn merge(pairs: &BTreeSet<(String, String)>, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            if i + 1 < tokens.len() && pairs.contains(&(tokens[i].clone(), tokens[i + 1].clone())) {
                out.push(format!("{}_{}", tokens[i], tokens[i + 1]));
                i += 2;
            } else {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
        out
    }
}
