use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextlabError {
    #[error("need at least {required} documents, got {actual}")]
    TooFewDocuments { required: usize, actual: usize },

    #[error("perplexity {perplexity} is infeasible for {points} points (must be < {limit})")]
    InfeasiblePerplexity {
        perplexity: f64,
        points: usize,
        limit: f64,
    },

    #[error("topic count {k} is invalid: {reason}")]
    InvalidTopicCount { k: usize, reason: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("input rows have inconsistent dimensions ({expected} vs {actual})")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, TextlabError>;
