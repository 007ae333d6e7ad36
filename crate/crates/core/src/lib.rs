//! Agreement and divergence analysis for panels of LLM and human raters
//! judging ethically charged scenarios.
//!
//! A run goes through these stages, each reading and writing a run
//! directory (see [`rundir`]):
//!
//! - [`corpus`]: load scenarios and render them into the prompt template;
//! - [`gateway`]: send every prompt to every rater, with caching and a manifest;
//! - [`parser`]: turn plain-text replies into [`Judgment`]s;
//! - [`agreement`]: TCR, BAR, z-scores, Fleiss' kappa, group comparison;
//! - [`analytics`]: explanation text analytics built on `ethiclens-textlab`;
//! - [`audit`]: stratified alignment sampling, triage and the expert/adjudication log;
//! - [`pipeline`]: stage functions shared by the command line and the service;
//! - [`report`]: deterministic publishable file set with a hashed index.

pub mod agreement;
pub mod analytics;
pub mod audit;
pub mod corpus;
pub mod gateway;
pub mod judgment;
pub mod parser;
pub mod pipeline;
pub mod report;
pub mod rundir;

pub use judgment::{Judgment, ParseFlag, Theory, Verdict};

use sha2::{Digest, Sha256};

/// Lower-case hex sha256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}
