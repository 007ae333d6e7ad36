//! Checks against the bundled fixture pack: every scripted reply parses to
//! its expected fields, and the resulting tables match the published values.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ethiclens_core::agreement::{self, agreement_table, Thresholds};
use ethiclens_core::audit::{AuditStore, ExpertResponse};
use ethiclens_core::gateway::RawResponse;
use ethiclens_core::parser::{parse_responses, parse_text};
use ethiclens_core::{Judgment, Theory, Verdict};
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[derive(Deserialize)]
struct Row {
    rater: String,
    scenario_id: String,
    text: String,
    expected_theory: Theory,
    expected_verdict: Verdict,
    expected_explanation: String,
}

fn rows(name: &str) -> Vec<Row> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn judgments(name: &str) -> Vec<Judgment> {
    let raw: Vec<RawResponse> = rows(name)
        .into_iter()
        .map(|r| RawResponse::new(r.rater, r.scenario_id, r.text))
        .collect();
    let (js, report) = parse_responses(&raw);
    assert!(report.failed.is_empty(), "{:?}", report.failed);
    js
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn every_scripted_reply_parses_to_its_expected_fields() {
    let all = rows("llm_responses.jsonl");
    assert_eq!(all.len(), 48);
    for r in all.iter().chain(rows("piracy_responses.jsonl").iter()) {
        let p = parse_text(&r.text).unwrap_or_else(|e| panic!("{} {}: {e}\n{}", r.rater, r.scenario_id, r.text));
        assert_eq!(
            (p.theory, p.verdict, p.explanation.as_str()),
            (r.expected_theory, r.expected_verdict, r.expected_explanation.as_str()),
            "{} {}:\n{}",
            r.rater,
            r.scenario_id,
            r.text
        );
        assert!(r.text.contains(&p.explanation));
    }
}

#[test]
fn model_table_matches_published_rates() {
    let table = agreement_table(&judgments("llm_responses.jsonl"), &BTreeMap::new(), Thresholds::default()).unwrap();
    let got: Vec<(&str, f64, Theory, f64, Verdict)> = table
        .rows
        .iter()
        .map(|r| {
            let a = &r.agreement;
            (a.scenario_id.as_str(), a.tcr, a.modal_theory, a.bar, a.modal_verdict)
        })
        .collect();
    assert_eq!(
        got,
        vec![
            ("s01", 0.4375, Theory::Utilitarianism, 1.0, Verdict::Yes),
            ("s02", 0.5, Theory::Utilitarianism, 0.9375, Verdict::Yes),
            ("s03", 0.75, Theory::Deontology, 1.0, Verdict::Yes),
        ]
    );
    assert!(table.rows.iter().all(|r| r.agreement.n == 16 && !r.agreement.theory_tie));
}

#[test]
#[allow(clippy::approx_constant)]
fn model_z_scores_match_hand_computation() {
    let table = agreement_table(&judgments("llm_responses.jsonl"), &BTreeMap::new(), Thresholds::default()).unwrap();
    let z = table.z_rows().unwrap();
    // Independent population-sd computation.
    let oracle = |xs: [f64; 3]| {
        let m = xs.iter().sum::<f64>() / 3.0;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        xs.map(|x| (x - m) / sd)
    };
    let zt = oracle([7.0 / 16.0, 8.0 / 16.0, 12.0 / 16.0]);
    let zb = oracle([1.0, 15.0 / 16.0, 1.0]);
    for i in 0..3 {
        assert!(close(z[i].z_tcr, zt[i], 1e-12));
        assert!(close(z[i].z_bar, zb[i], 1e-12));
        assert!(close(z[i].combined, (zt[i] + zb[i]) / 2.0, 1e-12));
    }
    let rounded: Vec<f64> = z.iter().map(|r| (r.z_tcr * 1e4).round() / 1e4).collect();
    assert_eq!(rounded, vec![-0.9258, -0.4629, 1.3887]);
    let rounded: Vec<f64> = z.iter().map(|r| (r.z_bar * 1e4).round() / 1e4).collect();
    assert_eq!(rounded, vec![0.7071, -1.4142, 0.7071]);
}

#[test]
fn expert_table_matches_published_rates() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AuditStore::open(dir.path(), ["s01", "s02", "s03"].map(String::from)).unwrap();
    for line in std::fs::read_to_string(fixture("expert_responses.jsonl")).unwrap().lines() {
        let r: ExpertResponse = serde_json::from_str(line).unwrap();
        store.ingest_expert_response(r).unwrap();
    }
    let table = agreement_table(&store.expert_judgments(), &BTreeMap::new(), Thresholds::default()).unwrap();
    let got: Vec<(f64, Theory, f64, Verdict)> = table
        .rows
        .iter()
        .map(|r| {
            let a = &r.agreement;
            (a.tcr, a.modal_theory, a.bar, a.modal_verdict)
        })
        .collect();
    let two_thirds = 2.0 / 3.0;
    assert_eq!(
        got,
        vec![
            (two_thirds, Theory::VirtueEthics, 1.0, Verdict::Yes),
            (1.0, Theory::Utilitarianism, two_thirds, Verdict::Yes),
            (two_thirds, Theory::Deontology, two_thirds, Verdict::Yes),
        ]
    );
    let pct: Vec<String> = table.rows.iter().map(|r| format!("{:.2}", r.agreement.tcr * 100.0)).collect();
    assert_eq!(pct, ["66.67", "100.00", "66.67"]);
}

#[test]
fn piracy_split_still_agrees_on_verdict() {
    let js = judgments("piracy_responses.jsonl");
    let t = agreement::tally(&js).unwrap();
    let th = agreement::tcr(&t);
    let vb = agreement::bar(&t);
    assert_eq!((th.rate, th.value), (0.375, Theory::Deontology));
    assert_eq!((vb.rate, vb.value), (0.9375, Verdict::No));
    assert!(js.iter().any(|j| j.theory == Theory::Deontology
        && j.verdict == Verdict::No
        && j.explanation == "Disregards others' intellectual property rights and moral principles."));
}
