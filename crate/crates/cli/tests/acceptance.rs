//! Acceptance suite. Prints one `PASS`, `FAIL` or `SKIP` line per criterion
//! and exits non-zero when any criterion fails.
//!
//! Set `ETHICLENS_REPLICATION_RUN` to a run directory holding the full
//! response set to enable the full-scale reproduction check.

#[path = "../../textlab/tests/oracle/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ethiclens_core::agreement::{
    self, agreement_table, combined, fleiss_kappa, zscores, Dimension, MetricSeries, Thresholds, VoteTally,
};
use ethiclens_core::audit::{AuditStore, ExpertResponse};
use ethiclens_core::gateway::RawResponse;
use ethiclens_core::parser::{parse_responses, parse_text};
use ethiclens_core::{Judgment, Theory, Verdict};
use ethiclens_textlab::coherence::{coherence_scan, CoherenceConfig};
use ethiclens_textlab::pca::{PcaModel, ProjectionDiagnostics};
use ethiclens_textlab::{cosine, lda_train, tfidf, tsne, LdaConfig, TfidfConfig, TokenizedDoc, TsneConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Outcome, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn jsonl(name: &str) -> Vec<Value> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn fixture_judgments(name: &str) -> Result<Vec<Judgment>, String> {
    let raw: Vec<RawResponse> = jsonl(name)
        .iter()
        .map(|r| {
            RawResponse::new(
                r["rater"].as_str().unwrap(),
                r["scenario_id"].as_str().unwrap(),
                r["text"].as_str().unwrap(),
            )
        })
        .collect();
    let (js, report) = parse_responses(&raw);
    ensure!(report.failed.is_empty(), "unparsed replies: {:?}", report.failed);
    Ok(js)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn model_table() -> Result<Outcome, String> {
    let start = Instant::now();
    let js = fixture_judgments("llm_responses.jsonl")?;
    let table = agreement_table(&js, &BTreeMap::new(), Thresholds::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let want = [
        (0.4375, Theory::Utilitarianism, 1.0),
        (0.5, Theory::Utilitarianism, 0.9375),
        (0.75, Theory::Deontology, 1.0),
    ];
    ensure!(table.rows.len() == 3, "{} rows", table.rows.len());
    for (row, (tcr, theory, bar)) in table.rows.iter().zip(want) {
        let a = &row.agreement;
        ensure!(a.n == 16, "{}: {} raters", a.scenario_id, a.n);
        ensure!(
            close(a.tcr, tcr, 1e-9) && a.modal_theory == theory && close(a.bar, bar, 1e-9),
            "{}: got ({}, {}, {})",
            a.scenario_id,
            a.tcr,
            a.modal_theory,
            a.bar
        );
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(Outcome::Pass(format!("3 scenarios x 16 raters in {} ms", elapsed.as_millis())))
}

fn expert_table() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut store = AuditStore::open(dir.path(), ["s01", "s02", "s03"].map(String::from)).map_err(|e| e.to_string())?;
    for r in jsonl("expert_responses.jsonl") {
        let r: ExpertResponse = serde_json::from_value(r).map_err(|e| e.to_string())?;
        store.ingest_expert_response(r).map_err(|e| e.to_string())?;
    }
    let table =
        agreement_table(&store.expert_judgments(), &BTreeMap::new(), Thresholds::default()).map_err(|e| e.to_string())?;
    let four = |x: f64| format!("{x:.4}");
    let tcr: Vec<String> = table.rows.iter().map(|r| four(r.agreement.tcr)).collect();
    let bar: Vec<String> = table.rows.iter().map(|r| four(r.agreement.bar)).collect();
    ensure!(tcr == ["0.6667", "1.0000", "0.6667"], "TCR {tcr:?}");
    ensure!(bar == ["1.0000", "0.6667", "0.6667"], "BAR {bar:?}");
    Ok(Outcome::Pass(format!("TCR {tcr:?} BAR {bar:?}")))
}

fn piracy() -> Result<Outcome, String> {
    let js = fixture_judgments("piracy_responses.jsonl")?;
    let t = agreement::tally(&js).map_err(|e| e.to_string())?;
    let (th, vb) = (agreement::tcr(&t), agreement::bar(&t));
    ensure!(vb.rate == 0.9375 && vb.value == Verdict::No, "BAR {} {}", vb.rate, vb.value);
    ensure!(th.rate == 0.375, "TCR {}", th.rate);
    Ok(Outcome::Pass(format!("BAR {} modal {}, TCR {}", vb.rate, vb.value, th.rate)))
}

fn z_properties() -> Result<Outcome, String> {
    let mut runner = TestRunner::new_with_rng(
        Config { cases: 512, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&prop::collection::vec(0.0f64..=1.0, 2..60), |values| {
            let first = values[0];
            if values.iter().all(|&v| v == first) {
                return Ok(());
            }
            let z = zscores(&MetricSeries::new(values)).unwrap();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() <= 1e-9, "mean {}", mean);
            prop_assert!((sd - 1.0).abs() <= 1e-9, "sd {}", sd);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    runner
        .run(&(-5.0f64..5.0, -5.0f64..5.0), |(a, b)| {
            prop_assert_eq!(combined(a, b), (a + b) / 2.0);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    runner
        .run(&(0.0f64..=1.0, 2usize..40), |(v, n)| {
            let z = zscores(&MetricSeries::new(vec![v; n])).unwrap();
            prop_assert!(z.iter().all(|&x| x == 0.0));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(Outcome::Pass("512 cases per property".into()))
}

fn theory_tally(id: &str, counts: [usize; 3]) -> VoteTally {
    VoteTally {
        scenario_id: id.into(),
        n: counts.iter().sum(),
        theory_counts: Theory::ALL.into_iter().zip(counts).filter(|(_, c)| *c > 0).collect(),
        verdict_counts: BTreeMap::from([(Verdict::Yes, counts.iter().sum())]),
    }
}

fn kappa() -> Result<Outcome, String> {
    // Four subjects, three raters each. Agreement per subject is
    // {1, 1/3, 1/3, 1/3}, so P-bar = 1/2. Category shares are 5/12, 4/12 and
    // 3/12, so Pe = 50/144 and kappa = (1/2 - 50/144) / (1 - 50/144) = 22/94.
    let counts = [[3, 0, 0], [2, 1, 0], [0, 2, 1], [0, 1, 2]];
    let tallies: Vec<VoteTally> = counts.iter().enumerate().map(|(i, c)| theory_tally(&format!("s{i}"), *c)).collect();
    let k = fleiss_kappa(&tallies, Dimension::Theory, Thresholds::default()).map_err(|e| e.to_string())?;
    ensure!(close(k.kappa, 22.0 / 94.0, 1e-6), "kappa {} vs {}", k.kappa, 22.0 / 94.0);
    let unanimous: Vec<VoteTally> = (0..4)
        .map(|i| {
            let mut c = [0; 3];
            c[i % 3] = 3;
            theory_tally(&format!("u{i}"), c)
        })
        .collect();
    let u = fleiss_kappa(&unanimous, Dimension::Theory, Thresholds::default()).map_err(|e| e.to_string())?;
    ensure!(close(u.kappa, 1.0, 1e-12), "unanimous kappa {}", u.kappa);
    Ok(Outcome::Pass(format!("kappa {:.6}, unanimous {}", k.kappa, u.kappa)))
}

fn parser_pack() -> Result<Outcome, String> {
    let rows = jsonl("llm_responses.jsonl");
    ensure!(rows.len() == 48, "{} fixture replies", rows.len());
    let mut formats = BTreeMap::<String, usize>::new();
    for r in &rows {
        let text = r["text"].as_str().unwrap();
        let p = parse_text(text).map_err(|e| format!("{} {}: {e}", r["rater"], r["scenario_id"]))?;
        let theory: Theory = serde_json::from_value(r["expected_theory"].clone()).unwrap();
        let verdict: Verdict = serde_json::from_value(r["expected_verdict"].clone()).unwrap();
        ensure!(
            p.theory == theory && p.verdict == verdict && p.explanation == r["expected_explanation"].as_str().unwrap(),
            "{} {}: got ({}, {}, {:?})",
            r["rater"],
            r["scenario_id"],
            p.theory,
            p.verdict,
            p.explanation
        );
        *formats.entry(r["format"].as_str().unwrap_or("").to_owned()).or_default() += 1;
    }
    Ok(Outcome::Pass(format!("48/48 triples, formats {formats:?}")))
}

fn docs_from(raw: &[Vec<String>]) -> Vec<TokenizedDoc> {
    raw.iter().enumerate().map(|(i, t)| TokenizedDoc::new(format!("d{i}"), t.clone())).collect()
}

fn tfidf_cosine() -> Result<Outcome, String> {
    let word = prop::sample::select(vec!["duty", "harm", "care", "virtue", "rule", "benefit", "trust"])
        .prop_map(str::to_owned);
    let corpora = (prop::collection::vec(prop::collection::vec(word, 0..7), 2..=5), 1usize..=2);
    let mut runner = TestRunner::new_with_rng(
        Config { cases: 256, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&corpora, |(raw, min_df)| {
            let docs = docs_from(&raw);
            let model = tfidf(&docs, TfidfConfig { min_df }).unwrap();
            let expected = oracle::brute_tfidf(&raw, min_df);
            for (v, e) in model.vectors.iter().zip(&expected) {
                for (term, w) in e {
                    let got = model.term_index(term).map(|i| v.get(i)).unwrap_or(0.0);
                    prop_assert!((got - w).abs() < 1e-9, "{}: {} vs {}", term, got, w);
                }
            }
            for i in 0..docs.len() {
                for j in 0..docs.len() {
                    let got = cosine(&model.vectors[i], &model.vectors[j]);
                    let want = oracle::brute_cosine(&expected[i], &expected[j]);
                    prop_assert!((got - want).abs() < 1e-9, "cos({}, {}) {} vs {}", i, j, got, want);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(Outcome::Pass("256 toy corpora of 2 to 5 documents".into()))
}

fn pca_against_jacobi(rows: &[Vec<f64>]) -> Result<(), String> {
    let d = rows[0].len();
    let model = PcaModel::fit(rows, d).map_err(|e| e.to_string())?;
    let (values, vectors) = oracle::jacobi_eigen(&oracle::covariance(rows));
    let k = model.components.len().min(2);
    for c in 0..k {
        ensure!(
            close(model.explained_variance[c], values[c], 1e-6),
            "variance {c}: {} vs {}",
            model.explained_variance[c],
            values[c]
        );
        let got = &model.components[c];
        let sign = got.iter().zip(&vectors[c]).map(|(a, b)| a * b).sum::<f64>().signum();
        for (g, w) in got.iter().zip(&vectors[c]) {
            ensure!(close(*g, sign * w, 1e-6), "component {c}: {got:?} vs {:?}", vectors[c]);
        }
    }
    ensure!(
        model.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12),
        "variances increase: {:?}",
        model.explained_variance
    );
    Ok(())
}

fn pca() -> Result<Outcome, String> {
    pca_against_jacobi(&oracle::toy_matrix(4, 4, 1))?;
    pca_against_jacobi(&oracle::toy_matrix(10, 6, 2))?;
    Ok(Outcome::Pass("4x4 and 10x6 match to 1e-6".into()))
}

fn two_clusters(per: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * per)
        .map(|i| {
            let base = if i < per { 0.0 } else { 5.0 };
            (0..dim).map(|_| base + rng.random::<f64>()).collect()
        })
        .collect()
}

fn tsne_clusters() -> Result<Outcome, String> {
    let rows = two_clusters(8, 10, 1);
    let ids: Vec<String> = (0..16).map(|i| format!("p{i}")).collect();
    let cfg = TsneConfig { perplexity: 4.0, seed: 42, ..Default::default() };
    let proj = tsne(&ids, &rows, cfg).map_err(|e| e.to_string())?;
    let again = tsne(&ids, &rows, cfg).map_err(|e| e.to_string())?;
    let dist = |a: usize, b: usize| {
        let (p, q) = (&proj.points[a], &proj.points[b]);
        ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
    };
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0.0, 0.0, 0.0);
    for a in 0..16 {
        for b in (a + 1)..16 {
            if (a < 8) == (b < 8) {
                intra += dist(a, b);
                ni += 1.0;
            } else {
                inter += dist(a, b);
                nx += 1.0;
            }
        }
    }
    let ratio = (intra / ni) / (inter / nx);
    let ProjectionDiagnostics::Tsne { initial_kl, final_kl, .. } = proj.diagnostics else {
        return Err("projection did not report t-SNE diagnostics".into());
    };
    ensure!(final_kl < initial_kl, "KL {initial_kl} -> {final_kl}");
    ensure!(ratio < 0.5, "intra/inter ratio {ratio}");
    let stable = proj
        .points
        .iter()
        .zip(&again.points)
        .all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits());
    ensure!(stable, "same seed gave different layouts");
    Ok(Outcome::Pass(format!("KL {initial_kl:.3} -> {final_kl:.3}, ratio {ratio:.3}")))
}

fn separable_corpus(groups: usize, words: usize, docs_per_group: usize, len: usize, seed: u64) -> Vec<TokenizedDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for g in 0..groups {
        for d in 0..docs_per_group {
            let tokens = (0..len).map(|_| format!("g{g}w{:02}", rng.random_range(0..words))).collect();
            out.push(TokenizedDoc::new(format!("g{g}d{d}"), tokens));
        }
    }
    out
}

/// Every document holds each word of its group once plus `extra` random
/// draws from the group, so whole documents give every within-group pair the
/// same co-occurrence while term frequencies still vary.
fn saturated_corpus(groups: usize, words: usize, docs_per_group: usize, extra: usize, seed: u64) -> Vec<TokenizedDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for g in 0..groups {
        for d in 0..docs_per_group {
            let tokens = (0..words)
                .chain((0..extra).map(|_| rng.random_range(0..words)))
                .map(|w| format!("g{g}w{w:02}"))
                .collect();
            out.push(TokenizedDoc::new(format!("g{g}d{d}"), tokens));
        }
    }
    out
}

fn lda() -> Result<Outcome, String> {
    let docs = separable_corpus(2, 12, 20, 20, 1);
    let cfg = LdaConfig { alpha: Some(0.1), iterations: 300, seed: 7, ..LdaConfig::new(2) };
    let m = lda_train(&docs, cfg).map_err(|e| e.to_string())?;
    let mut purity = Vec::new();
    for topic in &m.top_terms {
        ensure!(topic.len() == 10, "topic has {} top terms", topic.len());
        let first = &topic[0].term[..2];
        let same = topic.iter().filter(|t| &t.term[..2] == first).count();
        ensure!(same >= 9, "topic mixes vocabularies: {topic:?}");
        purity.push(same);
    }
    for row in m.phi.iter().chain(&m.theta) {
        let s: f64 = row.iter().sum();
        ensure!(close(s, 1.0, 1e-9), "row sums to {s}");
    }
    let mut picked = Vec::new();
    for c in [2usize, 3, 4] {
        let docs = saturated_corpus(c, 10, 12, 10, c as u64);
        let base = LdaConfig { alpha: Some(0.1), iterations: 300, seed: 3, ..LdaConfig::new(2) };
        let (curve, _) = coherence_scan(&docs, 2..=6, base, CoherenceConfig { window: 20, top_n: 10 })
            .map_err(|e| e.to_string())?;
        ensure!(curve.selected_k == Some(c), "c = {c}: selected {:?} from {:?}", curve.selected_k, curve.points);
        picked.push(c);
    }
    Ok(Outcome::Pass(format!("top-10 purity {purity:?}/10, coherence picks k = c for c in {picked:?}")))
}

fn ethiclens(run: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ethiclens"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else if entry.file_name() != ".lock" {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

fn full_scale() -> Result<Outcome, String> {
    let Some(source) = std::env::var_os("ETHICLENS_REPLICATION_RUN") else {
        return Ok(Outcome::Skip(
            "ETHICLENS_REPLICATION_RUN not set; the property checks above stand in".into(),
        ));
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dir.path().join("replication");
    copy_tree(Path::new(&source), &run).map_err(|e| e.to_string())?;
    ethiclens(&run, &["parse"])?;
    let m = ethiclens(&run, &["metrics"])?;
    ethiclens(&run, &["analyze", "--no-projections", "--no-topics"])?;
    let (tcr, bar) = (m["mean_tcr"].as_f64().unwrap_or(f64::NAN), m["mean_bar"].as_f64().unwrap_or(f64::NAN));
    ensure!(close(tcr, 0.733, 0.005), "mean TCR {tcr}");
    ensure!(close(bar, 0.867, 0.005), "mean BAR {bar}");
    let sim: Value = serde_json::from_slice(
        &std::fs::read(run.join("analysis/similarity.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let stat = |k: &str| sim[k].as_f64().unwrap_or(f64::NAN);
    let (mean, min, max) = (stat("global_mean"), stat("global_min"), stat("global_max"));
    ensure!(close(mean, 0.11, 0.02), "similarity mean {mean}");
    ensure!(close(min, 0.02, 0.02), "similarity min {min}");
    ensure!(close(max, 0.17, 0.02), "similarity max {max}");
    Ok(Outcome::Pass(format!(
        "TCR {tcr:.4} BAR {bar:.4} similarity {mean:.3}/{min:.3}/{max:.3}"
    )))
}

fn report_tree(run: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    let root = run.join("report");
    walk(&root, &root, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

fn end_to_end() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dir.path().join("run");
    let corpus = fixture("corpus.jsonl");
    let raters = fixture("raters.offline.json");
    let start = Instant::now();
    let r = ethiclens(
        &run,
        &["run", "--corpus", corpus.to_str().unwrap(), "--raters", raters.to_str().unwrap(), "--offline"],
    )?;
    ensure!(r["ok"] == 48, "run summary {r}");
    ethiclens(&run, &["parse"])?;
    ethiclens(&run, &["metrics"])?;
    ethiclens(&run, &["report"])?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    let first = report_tree(&run)?;
    ensure!(!first.is_empty(), "report directory is empty");
    for stage in ["run", "parse", "metrics", "report"] {
        ethiclens(&run, &[stage])?;
    }
    let second = report_tree(&run)?;
    ensure!(first == second, "report changed on rerun");
    Ok(Outcome::Pass(format!(
        "{} report files, byte-identical on rerun, {} ms",
        first.len(),
        elapsed.as_millis()
    )))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 12] = [
        ("model agreement table", model_table),
        ("expert agreement table", expert_table),
        ("piracy scenario", piracy),
        ("z-score properties", z_properties),
        ("fleiss kappa", kappa),
        ("parser fixture pack", parser_pack),
        ("tf-idf and cosine", tfidf_cosine),
        ("pca", pca),
        ("t-sne", tsne_clusters),
        ("lda and coherence", lda),
        ("full-scale reproduction", full_scale),
        ("end-to-end offline", end_to_end),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(Outcome::Pass(detail)) => println!("PASS {name}: {detail}"),
            Ok(Outcome::Skip(detail)) => println!("SKIP {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
