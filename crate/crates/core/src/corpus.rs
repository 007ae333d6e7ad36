//! Scenario corpus and prompt template.
//!
//! A corpus file holds one JSON object per line:
//! `{"id": "s01", "statement": "...", "tags": [...], "source": "..."}`.
//! `tags` and `source` are optional. Blank lines are ignored. Statements are
//! trimmed at load time; internal whitespace is kept as written.
//!
//! Ids are also used as file names inside a run directory, so they are
//! restricted to ASCII letters, digits, `.`, `_` and `-`.
//!
//! [`to_jsonl`] writes the canonical form: compact JSON with keys in the order
//! `id, statement, tags, source`, `source` omitted when absent, one record per
//! line with a trailing newline. Loading a canonical file and writing it again
//! is byte-identical.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sha256_hex;

/// Placeholder replaced by the scenario statement.
pub const PLACEHOLDER: &str = "{SCENARIO}";

const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate scenario id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("template must contain exactly one {PLACEHOLDER} placeholder, found {found}")]
    Placeholder { found: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub statement: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Parse corpus text. Line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<Scenario>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut s: Scenario = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !valid_id(&s.id) {
            return Err(CorpusError::Malformed {
                line,
                message: format!("invalid scenario id {:?}", s.id),
            });
        }
        s.statement = s.statement.trim().to_owned();
        if s.statement.is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: format!("scenario {:?} has an empty statement", s.id),
            });
        }
        if !seen.insert(s.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: s.id });
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Scenario>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

/// Canonical JSON-lines serialization.
pub fn to_jsonl(scenarios: &[Scenario]) -> String {
    let mut out = String::new();
    for s in scenarios {
        out.push_str(&serde_json::to_string(s).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    body: String,
}

impl PromptTemplate {
    pub fn new(body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let found = body.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(CorpusError::Placeholder { found });
        }
        Ok(Self { body })
    }

    /// The shipped three-question template.
    pub fn default_template() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }

    /// Load a template file; its bytes are used exactly as stored.
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(body)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// sha256 of the template body; pins the exact prompt wording of a run.
    pub fn hash(&self) -> String {
        sha256_hex(&self.body)
    }

    /// Text before and after the placeholder.
    pub fn parts(&self) -> (&str, &str) {
        self.body.split_once(PLACEHOLDER).expect("validated template")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub scenario_id: String,
    pub text: String,
}

pub fn render_prompt(scenario: &Scenario, template: &PromptTemplate) -> RenderedPrompt {
    let (head, tail) = template.parts();
    let mut text = String::with_capacity(head.len() + scenario.statement.len() + tail.len());
    text.push_str(head);
    text.push_str(&scenario.statement);
    text.push_str(tail);
    RenderedPrompt {
        scenario_id: scenario.id.clone(),
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(id: &str, statement: &str) -> Scenario {
        Scenario {
            id: id.into(),
            statement: statement.into(),
            tags: vec![],
            source: None,
        }
    }

    #[test]
    fn three_items() {
        let text = concat!(
            r#"{"id":"s01","statement":"A person helps a postal clerk manually assign queue numbers during a system failure.","tags":["civic"]}"#,
            "\n\n",
            r#"{"id":"s02","statement":"  A user donates a small amount to Wikipedia after reading a request for funding. ","source":"q2"}"#,
            "\n",
            r#"{"id":"s03","statement":"Someone finds a wallet with €1,000 and no ID and turns it in to the police."}"#,
            "\n"
        );
        let c = parse_corpus(text).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[1].statement, "A user donates a small amount to Wikipedia after reading a request for funding.");
        assert_eq!(c[0].tags, vec!["civic"]);
        assert_eq!(c[1].source.as_deref(), Some("q2"));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(parse_corpus(""), Err(CorpusError::Empty)));
        assert!(matches!(parse_corpus("\n  \n"), Err(CorpusError::Empty)));
        let dup = "{\"id\":\"s01\",\"statement\":\"a\"}\n{\"id\":\"s01\",\"statement\":\"b\"}\n";
        match parse_corpus(dup) {
            Err(CorpusError::DuplicateId { line, id }) => assert_eq!((line, id.as_str()), (2, "s01")),
            other => panic!("{other:?}"),
        }
        match parse_corpus("{\"id\":\"s01\",\"statement\":\"a\"}\nnot json\n") {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_corpus("{\"id\":\"s01\",\"statement\":\"   \"}").is_err());
        assert!(parse_corpus("{\"id\":\"../x\",\"statement\":\"a\"}").is_err());
    }

    #[test]
    fn substitution() {
        let t = PromptTemplate::new("X {SCENARIO} Y").unwrap();
        assert_eq!(render_prompt(&scenario("a", "Z"), &t).text, "X Z Y");
        assert!(matches!(PromptTemplate::new("none"), Err(CorpusError::Placeholder { found: 0 })));
        assert!(matches!(
            PromptTemplate::new("{SCENARIO}{SCENARIO}"),
            Err(CorpusError::Placeholder { found: 2 })
        ));
    }

    #[test]
    fn default_template_wallet() {
        let s = scenario("s03", "Someone finds a wallet with €1,000 and no ID and turns it in to the police.");
        let p = render_prompt(&s, &PromptTemplate::default_template());
        assert!(p.text.starts_with("Given the following scenario: Someone finds a wallet"));
        assert!(p.text.ends_with("3) Provide a brief explanation."));
        assert_eq!(p.text.lines().count(), 4);
    }

    #[test]
    fn canonical_round_trip() {
        let c = vec![
            Scenario {
                id: "s01".into(),
                statement: "One \"quoted\" statement.".into(),
                tags: vec!["a".into(), "b".into()],
                source: Some("src".into()),
            },
            scenario("s02", "Two."),
        ];
        let text = to_jsonl(&c);
        assert_eq!(parse_corpus(&text).unwrap(), c);
        assert_eq!(to_jsonl(&parse_corpus(&text).unwrap()), text);
    }
}
