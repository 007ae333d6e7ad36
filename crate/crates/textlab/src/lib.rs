//! Text analytics for rater explanations.
//!
//! Everything in this crate is deterministic: preprocessing is rule based and
//! the stochastic routines (t-SNE, LDA) take an explicit seed.

pub mod coherence;
pub mod error;
pub mod lda;
pub mod lexical;
pub mod pca;
pub mod preprocess;
pub mod similarity;
pub mod tfidf;
pub mod tsne;

pub use coherence::{coherence_scan, npmi_coherence, CoherenceConfig, CoherenceCurve};
pub use error::{Result, TextlabError};
pub use lda::{lda_train, LdaConfig, TopicModel};
pub use lexical::{lexical_stats, term_frequencies, LexicalStats, RaterLexicalStats};
pub use pca::{pca, Projection2D, ProjectionMethod};
pub use preprocess::{BigramDetector, Preprocessor, TokenizedDoc};
pub use similarity::{similarity_profile, Explanation, SimilarityProfile};
pub use tfidf::{cosine, tfidf, DocVector, TfidfConfig, TfidfModel};
pub use tsne::{tsne, TsneConfig};
