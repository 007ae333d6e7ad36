//! Extraction of (theory, verdict, explanation) from plain-text replies.
//!
//! Three stages are tried in order and the first that yields both a theory and
//! a verdict wins:
//!
//! 1. numbered answers (`1) ... 2) ... 3) ...`, also `1.`, `1:` and `(1)`);
//! 2. labeled fields (`Theory: ...`, `Verdict: ...`, `Explanation: ...`);
//! 3. free scan for the first theory stem and the first standalone yes/no.
//!    Results from this stage carry [`ParseFlag::AmbiguousFormat`].
//!
//! Before scanning, echoed prompt fragments are blanked out so they cannot
//! be mistaken for answers: the scenario line, the list of theory options,
//! `(yes/no)`, "Provide a brief explanation", and `<think>...</think>` blocks.
//! Blanking keeps byte offsets, so every extracted span is a slice of the
//! original reply.
//!
//! Verdicts are `yes`/`no` at word boundaries. When a span has no bare
//! yes/no, "not acceptable", "unacceptable", "impermissible" and similar read
//! as No, and a plain "acceptable"/"permissible" reads as Yes; both set
//! `AmbiguousFormat`.
//!
//! Theory stems are `utilitarian*`, `deontolog*` and `virtue*`. The synonyms
//! `consequentialis*` (Utilitarianism) and `kantian*` (Deontology) set
//! [`ParseFlag::SynonymMapped`]. Anything else, for example "care ethics",
//! is not a theory.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::RawResponse;
use crate::judgment::{Judgment, ParseFlag, Theory, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseError {
    #[error("empty response")]
    Empty,
    #[error("no theory token found")]
    TheoryMissing,
    #[error("no yes/no verdict found")]
    VerdictMissing,
    #[error("neither a theory nor a verdict was found")]
    Unparseable,
    #[error("theory and verdict found but no explanation text")]
    ExplanationMissing,
}

static THEORY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(utilitarian\w*|deontolog\w*|virtue\w*|consequentialis\w*|kantian\w*)").unwrap()
});
static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());
static NEGATIVE_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(not\s+(?:morally\s+)?(?:acceptable|permissible)|unacceptable|impermissible)\b").unwrap()
});
static POSITIVE_PHRASE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(acceptable|permissible)\b").unwrap());
static ECHOES: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"(?is)<think>.*?(?:</think>|\z)",
        r"(?im)^[ \t>*#_]*given the following scenario:.*$",
        r"(?i)utilitarianism\s*,\s*deontology\s*,?\s*(?:or|and)\s+virtue\s+ethics",
        r"(?i)\(?\byes\s*/\s*no\b\)?",
        r"(?i)\byes\s+or\s+no\b",
        r"(?i)provide\s+a\s+brief\s+explanation[.:]?",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});
static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)(?:^|[ \t])[ \t>*#_-]*\(?([1-3])\s*[).:]").unwrap());
static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"(?im)(?:^|[|;])[ \t>*#_-]*(?:\(?\d[).:][ \t]*)?[*_]*",
        r"(?P<label>(?:ethical|moral)\s+theory|theory|framework|lens|verdict|judge?ment|decision|answer",
        r"|(?:is\s+the\s+action\s+)?morally\s+acceptable\??|acceptable\??|acceptability",
        r"|explanation|reasoning|reason|justification|rationale)",
        r"(?:[ \t*_]*:|[ \t]+[-\u{2013}])[ \t*_]*"
    ))
    .unwrap()
});
static LEADING_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:explanation|reasoning|reason|justification|rationale)[ \t*_]*[:\-\u{2013}][ \t*_]*").unwrap()
});

/// Map a theory token to the enum; the flag is set for synonyms.
pub fn normalize_theory(token: &str) -> Result<(Theory, bool), ParseError> {
    let t = token.trim().to_lowercase();
    if t.starts_with("utilitarian") {
        Ok((Theory::Utilitarianism, false))
    } else if t.starts_with("deontolog") {
        Ok((Theory::Deontology, false))
    } else if t.starts_with("virtue") {
        Ok((Theory::VirtueEthics, false))
    } else if t.starts_with("consequentialis") {
        Ok((Theory::Utilitarianism, true))
    } else if t.starts_with("kantian") {
        Ok((Theory::Deontology, true))
    } else {
        Err(ParseError::TheoryMissing)
    }
}

/// Fields extracted from one reply. `explanation` is a slice of the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFields {
    pub theory: Theory,
    pub verdict: Verdict,
    pub explanation: String,
    pub flags: BTreeSet<ParseFlag>,
}

struct Found<T> {
    value: T,
    end: usize,
}

struct Scanner<'a> {
    text: &'a str,
    masked: String,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        let mut bytes = text.as_bytes().to_vec();
        for re in ECHOES.iter() {
            for m in re.find_iter(text) {
                bytes[m.range()].fill(b' ');
            }
        }
        // Only whole matches (on char boundaries) were replaced by ASCII.
        let masked = String::from_utf8(bytes).expect("masking keeps UTF-8 valid");
        Self { text, masked }
    }

    fn theory(&self, from: usize, to: usize, flags: &mut BTreeSet<ParseFlag>) -> Option<Found<Theory>> {
        let m = THEORY.find(&self.masked[from..to])?;
        let (theory, synonym) = normalize_theory(m.as_str()).ok()?;
        if synonym {
            flags.insert(ParseFlag::SynonymMapped);
        }
        Some(Found {
            value: theory,
            end: from + m.end(),
        })
    }

    fn verdict(&self, from: usize, to: usize, flags: &mut BTreeSet<ParseFlag>) -> Option<Found<Verdict>> {
        let span = &self.masked[from..to];
        if let Some(m) = YES_NO.find(span) {
            let value = if m.as_str().eq_ignore_ascii_case("yes") {
                Verdict::Yes
            } else {
                Verdict::No
            };
            return Some(Found {
                value,
                end: from + m.end(),
            });
        }
        let (m, value) = match NEGATIVE_PHRASE.find(span) {
            Some(m) => (m, Verdict::No),
            None => (POSITIVE_PHRASE.find(span)?, Verdict::Yes),
        };
        flags.insert(ParseFlag::AmbiguousFormat);
        Some(Found {
            value,
            end: from + m.end(),
        })
    }

    /// Trimmed explanation inside `[from, to)`, with blanked echoes, markdown
    /// emphasis and a leading "Explanation:" label removed.
    fn explanation(&self, mut from: usize, mut to: usize) -> Option<String> {
        let skip = |c: char| c.is_whitespace() || c == '*';
        let masked = &self.masked;
        while from < to {
            let c = masked[from..].chars().next().unwrap();
            if !skip(c) {
                break;
            }
            from += c.len_utf8();
        }
        while to > from {
            let c = masked[..to].chars().next_back().unwrap();
            if !skip(c) {
                break;
            }
            to -= c.len_utf8();
        }
        let mut span = &self.text[from..to];
        if let Some(m) = LEADING_LABEL.find(span) {
            span = span[m.end()..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
        }
        (!span.is_empty()).then(|| span.to_owned())
    }

    /// Text following `pos` once the rest of its clause (up to the next
    /// `.`, `!`, `?`, `:` or newline) is dropped; falls back to the text right
    /// after `pos`.
    fn residual(&self, pos: usize, to: usize) -> Option<String> {
        let rest = &self.masked[pos..to];
        if let Some(i) = rest.find(['.', '!', '?', ':', '\n']) {
            if let Some(e) = self.explanation(pos + i + 1, to) {
                return Some(e);
            }
        }
        let lead = rest.len() - rest.trim_start_matches(|c: char| c.is_whitespace() || ",.;:!?-)".contains(c)).len();
        self.explanation(pos + lead, to)
    }

    fn numbered(&self) -> Option<Result<ParsedFields, ParseError>> {
        let mut marks: [Option<(usize, usize)>; 3] = [None; 3];
        let mut next = 0;
        for c in MARKER.captures_iter(&self.masked) {
            let n: usize = c[1].parse().unwrap();
            if n == next + 1 {
                let whole = c.get(0).unwrap();
                marks[next] = Some((whole.start(), whole.end()));
                next += 1;
                if next == 3 {
                    break;
                }
            }
        }
        let (_, end1) = marks[0]?;
        let (start2, end2) = marks[1]?;
        let end_of_2 = marks[2].map_or(self.text.len(), |m| m.0);

        let mut flags = BTreeSet::new();
        let theory = self.theory(end1, start2, &mut flags)?;
        let verdict = self.verdict(end2, end_of_2, &mut flags)?;
        let explanation = match marks[2] {
            Some((_, end3)) => self
                .explanation(end3, self.text.len())
                .or_else(|| self.residual(verdict.end, end_of_2)),
            None => self.residual(verdict.end, end_of_2),
        };
        Some(finish(theory.value, verdict.value, explanation, flags))
    }

    fn labeled(&self) -> Option<Result<ParsedFields, ParseError>> {
        #[derive(PartialEq, Clone, Copy)]
        enum Kind {
            Theory,
            Verdict,
            Explanation,
        }
        let labels: Vec<(Kind, usize, usize)> = LABEL
            .captures_iter(&self.masked)
            .map(|c| {
                let label = c["label"].to_lowercase();
                let kind = if label.contains("theory") || label == "framework" || label == "lens" {
                    Kind::Theory
                } else if ["explanation", "reasoning", "reason", "justification", "rationale"].contains(&label.as_str()) {
                    Kind::Explanation
                } else {
                    Kind::Verdict
                };
                let whole = c.get(0).unwrap();
                (kind, whole.start(), whole.end())
            })
            .collect();
        let span_of = |kind: Kind| {
            labels.iter().enumerate().find(|(_, l)| l.0 == kind).map(|(i, l)| {
                let end = labels.get(i + 1).map_or(self.text.len(), |n| n.1);
                (l.2, end)
            })
        };
        let (t_from, t_to) = span_of(Kind::Theory)?;
        let (v_from, v_to) = span_of(Kind::Verdict)?;
        let mut flags = BTreeSet::new();
        let theory = self.theory(t_from, t_to, &mut flags)?;
        let verdict = self.verdict(v_from, v_to, &mut flags)?;
        let explanation = match span_of(Kind::Explanation) {
            Some((from, to)) => self.explanation(from, to),
            None => self.residual(verdict.end.max(theory.end), self.text.len()),
        };
        Some(finish(theory.value, verdict.value, explanation, flags))
    }

    fn free(&self) -> Result<ParsedFields, ParseError> {
        let mut flags = BTreeSet::from([ParseFlag::AmbiguousFormat]);
        let len = self.text.len();
        let theory = self.theory(0, len, &mut flags);
        let verdict = self.verdict(0, len, &mut flags);
        match (theory, verdict) {
            (None, None) => Err(ParseError::Unparseable),
            (None, Some(_)) => Err(ParseError::TheoryMissing),
            (Some(_), None) => Err(ParseError::VerdictMissing),
            (Some(t), Some(v)) => {
                let explanation = self.residual(t.end.max(v.end), len);
                finish(t.value, v.value, explanation, flags)
            }
        }
    }
}

fn finish(
    theory: Theory,
    verdict: Verdict,
    explanation: Option<String>,
    flags: BTreeSet<ParseFlag>,
) -> Result<ParsedFields, ParseError> {
    Ok(ParsedFields {
        theory,
        verdict,
        explanation: explanation.ok_or(ParseError::ExplanationMissing)?,
        flags,
    })
}

/// Parse a reply through the numbered, labeled and free-scan stages.
pub fn parse_text(text: &str) -> Result<ParsedFields, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let scanner = Scanner::new(text);
    if let Some(Ok(p)) = scanner.numbered() {
        return Ok(p);
    }
    if let Some(Ok(p)) = scanner.labeled() {
        return Ok(p);
    }
    scanner.free()
}

pub fn parse_response(raw: &RawResponse) -> Result<Judgment, ParseError> {
    let p = parse_text(&raw.text)?;
    Ok(Judgment {
        rater: raw.rater.clone(),
        scenario_id: raw.scenario_id.clone(),
        theory: p.theory,
        verdict: p.verdict,
        explanation: p.explanation,
        flags: p.flags,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub rater: String,
    pub scenario_id: String,
    pub reason: ParseError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub total: usize,
    pub parsed: usize,
    pub failed: Vec<ParseFailure>,
    /// How failed cells are treated downstream.
    pub policy: String,
}

pub const EXCLUSION_POLICY: &str =
    "unparseable cells are excluded from metric denominators and listed here; they are never imputed";

/// Parse every response. Order of the returned judgments follows the input.
pub fn parse_responses(responses: &[RawResponse]) -> (Vec<Judgment>, ParseReport) {
    let mut judgments = Vec::new();
    let mut failed = Vec::new();
    for raw in responses {
        match parse_response(raw) {
            Ok(j) => judgments.push(j),
            Err(reason) => failed.push(ParseFailure {
                rater: raw.rater.clone(),
                scenario_id: raw.scenario_id.clone(),
                reason,
            }),
        }
    }
    let report = ParseReport {
        total: responses.len(),
        parsed: judgments.len(),
        failed,
        policy: EXCLUSION_POLICY.to_owned(),
    };
    (judgments, report)
}
