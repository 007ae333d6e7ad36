//! Structured judgment shared by model and expert raters.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Ethical theory used as the normative lens. The declaration order is the
/// tie-breaking order for modal choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Theory {
    #[serde(alias = "utilitarianism", alias = "UTILITARIANISM")]
    Utilitarianism,
    #[serde(alias = "deontology", alias = "DEONTOLOGY")]
    Deontology,
    #[serde(
        alias = "virtue_ethics",
        alias = "virtue ethics",
        alias = "Virtue ethics",
        alias = "Virtue Ethics",
        alias = "VIRTUE_ETHICS"
    )]
    VirtueEthics,
}

impl Theory {
    pub const ALL: [Theory; 3] = [Theory::Utilitarianism, Theory::Deontology, Theory::VirtueEthics];

    pub fn as_str(self) -> &'static str {
        match self {
            Theory::Utilitarianism => "Utilitarianism",
            Theory::Deontology => "Deontology",
            Theory::VirtueEthics => "VirtueEthics",
        }
    }
}

impl fmt::Display for Theory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary acceptability verdict. `Yes` sorts first and wins verdict ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(alias = "yes", alias = "YES")]
    Yes,
    #[serde(alias = "no", alias = "NO")]
    No,
}

impl Verdict {
    pub const ALL: [Verdict; 2] = [Verdict::Yes, Verdict::No];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Yes => "Yes",
            Verdict::No => "No",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFlag {
    /// The theory was named through a synonym such as "consequentialist".
    SynonymMapped,
    /// Fields were found only by a fallback stage of the parser cascade.
    AmbiguousFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub rater: String,
    pub scenario_id: String,
    pub theory: Theory,
    pub verdict: Verdict,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<ParseFlag>,
}
