//! Agreement metrics over a panel of raters.
//!
//! - TCR: share of raters choosing the modal theory. Ties go to the earliest
//!   theory in `Utilitarianism < Deontology < VirtueEthics` and are flagged.
//! - BAR: share of raters giving the modal verdict. Ties go to `Yes` and are
//!   flagged.
//! - z-scores use the population standard deviation. A constant series maps
//!   to all zeros.
//! - The combined score is the midpoint of `z_tcr` and `z_bar`.
//! - Fleiss' kappa is computed over the whole run, per dimension.
//!
//! Category cutoffs (strong/green, fair/yellow, poor/red) are applied both to
//! run-level kappa and to per-scenario TCR/BAR proportions; output labels say
//! which is which.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judgment::{Judgment, Theory, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgreementError {
    #[error("no judgments")]
    Empty,
    #[error("judgments span several scenarios: {0:?}")]
    MixedScenarios(Vec<String>),
    #[error("z-scores need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("kappa needs every scenario rated by the same number (>= 2) of raters; found {0:?}")]
    UnequalRaters(Vec<usize>),
    #[error("scenario sets differ; only in first group: {only_first:?}, only in second: {only_second:?}")]
    ScenarioMismatch {
        only_first: Vec<String>,
        only_second: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, AgreementError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub scenario_id: String,
    pub n: usize,
    pub theory_counts: BTreeMap<Theory, usize>,
    pub verdict_counts: BTreeMap<Verdict, usize>,
}

impl VoteTally {
    pub fn theory(&self, t: Theory) -> usize {
        self.theory_counts.get(&t).copied().unwrap_or(0)
    }

    pub fn verdict(&self, v: Verdict) -> usize {
        self.verdict_counts.get(&v).copied().unwrap_or(0)
    }
}

/// Count one scenario's judgments.
pub fn tally(judgments: &[Judgment]) -> Result<VoteTally> {
    let first = judgments.first().ok_or(AgreementError::Empty)?;
    let ids: BTreeSet<&str> = judgments.iter().map(|j| j.scenario_id.as_str()).collect();
    if ids.len() > 1 {
        return Err(AgreementError::MixedScenarios(ids.into_iter().map(str::to_owned).collect()));
    }
    let mut theory_counts = BTreeMap::new();
    let mut verdict_counts = BTreeMap::new();
    for j in judgments {
        *theory_counts.entry(j.theory).or_insert(0) += 1;
        *verdict_counts.entry(j.verdict).or_insert(0) += 1;
    }
    Ok(VoteTally {
        scenario_id: first.scenario_id.clone(),
        n: judgments.len(),
        theory_counts,
        verdict_counts,
    })
}

/// Group judgments by scenario (ascending id) and tally each group.
pub fn tally_all(judgments: &[Judgment]) -> Vec<VoteTally> {
    let mut groups: BTreeMap<&str, Vec<Judgment>> = BTreeMap::new();
    for j in judgments {
        groups.entry(j.scenario_id.as_str()).or_default().push(j.clone());
    }
    groups.values().map(|g| tally(g).expect("non-empty single-scenario group")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Modal<T> {
    pub value: T,
    pub rate: f64,
    pub tie: bool,
}

fn modal<T: Copy + Ord>(order: &[T], count: impl Fn(T) -> usize, n: usize) -> Modal<T> {
    let best = order.iter().map(|&c| count(c)).max().unwrap_or(0);
    let winners: Vec<T> = order.iter().copied().filter(|&c| count(c) == best).collect();
    Modal {
        value: winners[0],
        rate: best as f64 / n as f64,
        tie: winners.len() > 1,
    }
}

/// Theory consistency rate and modal theory.
pub fn tcr(t: &VoteTally) -> Modal<Theory> {
    modal(&Theory::ALL, |c| t.theory(c), t.n)
}

/// Binary agreement rate and modal verdict.
pub fn bar(t: &VoteTally) -> Modal<Verdict> {
    modal(&Verdict::ALL, |c| t.verdict(c), t.n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub values: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
}

impl MetricSeries {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        // A constant series is exactly its own mean; summing would round.
        if let Some(&first) = values.first().filter(|&&f| values.iter().all(|&v| v == f)) {
            return Self { values, mu: first, sigma: 0.0 };
        }
        let mu = values.iter().sum::<f64>() / n;
        let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        Self { values, mu, sigma }
    }
}

pub fn zscores(series: &MetricSeries) -> Result<Vec<f64>> {
    if series.values.len() < 2 {
        return Err(AgreementError::TooFewValues(series.values.len()));
    }
    if series.sigma == 0.0 {
        return Ok(vec![0.0; series.values.len()]);
    }
    Ok(series.values.iter().map(|v| (v - series.mu) / series.sigma).collect())
}

pub fn combined(z_tcr: f64, z_bar: f64) -> f64 {
    (z_tcr + z_bar) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Strong,
    Fair,
    Poor,
}

impl Category {
    pub fn color(self) -> &'static str {
        match self {
            Category::Strong => "green",
            Category::Fair => "yellow",
            Category::Poor => "red",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Strong => "strong",
            Category::Fair => "fair",
            Category::Poor => "poor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Lower bound of `strong`.
    pub strong: f64,
    /// Lower bound of `fair`.
    pub fair: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { strong: 0.75, fair: 0.40 }
    }
}

impl Thresholds {
    pub fn categorize(&self, value: f64) -> Category {
        if value >= self.strong {
            Category::Strong
        } else if value >= self.fair {
            Category::Fair
        } else {
            Category::Poor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Theory,
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub dimension: Dimension,
    pub kappa: f64,
    pub category: Category,
    pub raters: usize,
    pub subjects: usize,
}

/// Fleiss' kappa over scenarios. When expected agreement is 1 (every rating
/// in one category), kappa is 1.
pub fn fleiss_kappa(tallies: &[VoteTally], dimension: Dimension, thresholds: Thresholds) -> Result<KappaResult> {
    let first = tallies.first().ok_or(AgreementError::Empty)?;
    let n = first.n;
    if n < 2 || tallies.iter().any(|t| t.n != n) {
        let sizes: BTreeSet<usize> = tallies.iter().map(|t| t.n).collect();
        return Err(AgreementError::UnequalRaters(sizes.into_iter().collect()));
    }
    let rows: Vec<Vec<usize>> = tallies
        .iter()
        .map(|t| match dimension {
            Dimension::Theory => Theory::ALL.iter().map(|&c| t.theory(c)).collect(),
            Dimension::Verdict => Verdict::ALL.iter().map(|&c| t.verdict(c)).collect(),
        })
        .collect();
    let subjects = rows.len() as f64;
    let nf = n as f64;
    let p_bar = rows
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / subjects;
    let categories = rows[0].len();
    let pe: f64 = (0..categories)
        .map(|j| {
            let p = rows.iter().map(|r| r[j] as f64).sum::<f64>() / (subjects * nf);
            p * p
        })
        .sum();
    let kappa = if (1.0 - pe).abs() < 1e-15 { 1.0 } else { (p_bar - pe) / (1.0 - pe) };
    Ok(KappaResult {
        dimension,
        kappa,
        category: thresholds.categorize(kappa),
        raters: n,
        subjects: rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub scenario_id: String,
    /// Raters with a parsed judgment for this scenario.
    pub n: usize,
    pub tcr: f64,
    pub modal_theory: Theory,
    pub theory_tie: bool,
    pub bar: f64,
    pub modal_verdict: Verdict,
    pub verdict_tie: bool,
    /// Raters dropped from this scenario because their reply did not parse.
    pub excluded: usize,
}

pub fn agreement_row(t: &VoteTally, excluded: usize) -> AgreementRow {
    let th = tcr(t);
    let vb = bar(t);
    AgreementRow {
        scenario_id: t.scenario_id.clone(),
        n: t.n,
        tcr: th.rate,
        modal_theory: th.value,
        theory_tie: th.tie,
        bar: vb.rate,
        modal_verdict: vb.value,
        verdict_tie: vb.tie,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZRow {
    pub scenario_id: String,
    pub z_tcr: f64,
    pub z_bar: f64,
    pub combined: f64,
}

pub fn z_rows(rows: &[AgreementRow]) -> Result<Vec<ZRow>> {
    let zt = zscores(&MetricSeries::new(rows.iter().map(|r| r.tcr).collect()))?;
    let zb = zscores(&MetricSeries::new(rows.iter().map(|r| r.bar).collect()))?;
    Ok(rows
        .iter()
        .zip(zt.into_iter().zip(zb))
        .map(|(r, (z_tcr, z_bar))| ZRow {
            scenario_id: r.scenario_id.clone(),
            z_tcr,
            z_bar,
            combined: combined(z_tcr, z_bar),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenarios: usize,
    pub mean_tcr: f64,
    pub mean_bar: f64,
}

/// Unweighted means over scenarios.
pub fn aggregate_run(rows: &[AgreementRow]) -> Result<RunSummary> {
    if rows.is_empty() {
        return Err(AgreementError::Empty);
    }
    let n = rows.len() as f64;
    Ok(RunSummary {
        scenarios: rows.len(),
        mean_tcr: rows.iter().map(|r| r.tcr).sum::<f64>() / n,
        mean_bar: rows.iter().map(|r| r.bar).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Both groups at or above the cutoff.
    Convergent,
    /// Both groups below the cutoff.
    Divergent,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub scenario_id: String,
    pub first: f64,
    pub second: f64,
    pub class: Alignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tau: f64,
    /// Pearson correlation of combined scores; absent when either side is constant.
    pub pearson: Option<f64>,
    pub scenarios: Vec<ScenarioComparison>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pair two groups' combined scores by scenario (ascending id).
pub fn compare_groups(first: &[ZRow], second: &[ZRow], tau: f64) -> Result<ComparisonReport> {
    let a: BTreeMap<&str, f64> = first.iter().map(|r| (r.scenario_id.as_str(), r.combined)).collect();
    let b: BTreeMap<&str, f64> = second.iter().map(|r| (r.scenario_id.as_str(), r.combined)).collect();
    let only_first: Vec<String> = a.keys().filter(|k| !b.contains_key(*k)).map(|k| k.to_string()).collect();
    let only_second: Vec<String> = b.keys().filter(|k| !a.contains_key(*k)).map(|k| k.to_string()).collect();
    if !only_first.is_empty() || !only_second.is_empty() {
        return Err(AgreementError::ScenarioMismatch { only_first, only_second });
    }
    let scenarios: Vec<ScenarioComparison> = a
        .iter()
        .map(|(id, &x)| {
            let y = b[id];
            let class = match (x >= tau, y >= tau) {
                (true, true) => Alignment::Convergent,
                (false, false) => Alignment::Divergent,
                _ => Alignment::Mixed,
            };
            ScenarioComparison {
                scenario_id: id.to_string(),
                first: x,
                second: y,
                class,
            }
        })
        .collect();
    let xs: Vec<f64> = scenarios.iter().map(|s| s.first).collect();
    let ys: Vec<f64> = scenarios.iter().map(|s| s.second).collect();
    Ok(ComparisonReport {
        tau,
        pearson: pearson(&xs, &ys),
        scenarios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(flatten)]
    pub agreement: AgreementRow,
    /// Absent when the table has fewer than two scenarios.
    pub z_tcr: Option<f64>,
    pub z_bar: Option<f64>,
    pub combined: Option<f64>,
    /// Per-scenario TCR proportion mapped through the category cutoffs.
    pub tcr_category: Category,
    pub bar_category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub standard_deviation: String,
    pub theory_tie_break: String,
    pub verdict_tie_break: String,
    pub thresholds: Thresholds,
    pub row_categories: String,
    pub exclusion_policy: String,
}

impl TableMetadata {
    fn new(thresholds: Thresholds) -> Self {
        Self {
            standard_deviation: "population".into(),
            theory_tie_break: "Utilitarianism < Deontology < VirtueEthics".into(),
            verdict_tie_break: "Yes".into(),
            thresholds,
            row_categories: "per-scenario TCR/BAR proportions mapped through the kappa cutoffs".into(),
            exclusion_policy: "raters whose reply did not parse are dropped per scenario; see `excluded`".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub rows: Vec<TableRow>,
    pub summary: RunSummary,
    /// Run-level kappa; absent when scenarios have unequal rater counts.
    pub kappa_theory: Option<KappaResult>,
    pub kappa_verdict: Option<KappaResult>,
    pub metadata: TableMetadata,
}

/// Build the full table. `excluded` maps scenario id to the number of raters
/// whose replies failed to parse there.
pub fn agreement_table(
    judgments: &[Judgment],
    excluded: &BTreeMap<String, usize>,
    thresholds: Thresholds,
) -> Result<AgreementTable> {
    let tallies = tally_all(judgments);
    if tallies.is_empty() {
        return Err(AgreementError::Empty);
    }
    let rows: Vec<AgreementRow> = tallies
        .iter()
        .map(|t| agreement_row(t, excluded.get(&t.scenario_id).copied().unwrap_or(0)))
        .collect();
    let z = z_rows(&rows).ok();
    let table_rows = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let zr = z.as_ref().map(|z| &z[i]);
            TableRow {
                tcr_category: thresholds.categorize(r.tcr),
                bar_category: thresholds.categorize(r.bar),
                agreement: r.clone(),
                z_tcr: zr.map(|z| z.z_tcr),
                z_bar: zr.map(|z| z.z_bar),
                combined: zr.map(|z| z.combined),
            }
        })
        .collect();
    Ok(AgreementTable {
        rows: table_rows,
        summary: aggregate_run(&rows)?,
        kappa_theory: fleiss_kappa(&tallies, Dimension::Theory, thresholds).ok(),
        kappa_verdict: fleiss_kappa(&tallies, Dimension::Verdict, thresholds).ok(),
        metadata: TableMetadata::new(thresholds),
    })
}

impl AgreementTable {
    pub fn z_rows(&self) -> Option<Vec<ZRow>> {
        self.rows
            .iter()
            .map(|r| {
                Some(ZRow {
                    scenario_id: r.agreement.scenario_id.clone(),
                    z_tcr: r.z_tcr?,
                    z_bar: r.z_bar?,
                    combined: r.combined?,
                })
            })
            .collect()
    }

    /// CSV with one row per scenario. Floats use the shortest exact
    /// representation.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "scenario_id,n,excluded,tcr,modal_theory,theory_tie,bar,modal_verdict,verdict_tie,\
             z_tcr,z_bar,combined,tcr_category,tcr_color,bar_category,bar_color\n",
        );
        for r in &self.rows {
            let a = &r.agreement;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&a.scenario_id),
                a.n,
                a.excluded,
                a.tcr,
                a.modal_theory,
                a.theory_tie,
                a.bar,
                a.modal_verdict,
                a.verdict_tie,
                opt(r.z_tcr),
                opt(r.z_bar),
                opt(r.combined),
                r.tcr_category.as_str(),
                r.tcr_category.color(),
                r.bar_category.as_str(),
                r.bar_category.color(),
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Quote a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
