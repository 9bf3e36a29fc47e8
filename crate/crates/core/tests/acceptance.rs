//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (written directly, so it shows without `--nocapture`).
//!
//! Criterion 3a needs real pretrained word vectors (GloVe/word2vec text
//! format) at the path in `SELFTRAIN_EMBEDDINGS`; without them it reports
//! FAIL (blocked). Run the strict variant with `--include-ignored`. Criterion 7 needs a GPU
//! and external NLI models and is not run here.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selftrain::backend::MockBackend;
use selftrain::config::FineTuneSpec;
use selftrain::eval::{evaluate_accuracy, mean, null_rejection_rate, paired_ttest, sem};
use selftrain::masking::{load_embeddings, Masker};
use selftrain::selection::{generate_negatives, select_positives, ScoreMatrix};
use selftrain::selftrain::{RunDir, SelfTrainer};
use selftrain::synthetic::{SyntheticSpec, SyntheticWorld};
use selftrain::{ClassSet, ContrastStrategy, HypothesisTemplate, SelfTrainConfig};
use serde_json::Value;

type Outcome = Result<String, String>;

fn report(id: &str, title: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(detail) => format!("acceptance {id}: PASS  {title} ({detail})"),
        Err(why) => format!("acceptance {id}: FAIL  {title} ({why})"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn check(id: &str, title: &str, f: impl FnOnce() -> Outcome) {
    let outcome = f();
    report(id, title, &outcome);
    if let Err(why) = outcome {
        panic!("criterion {id} failed: {why}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn class_set(k: usize) -> ClassSet {
    ClassSet::new("random", (0..k).map(|c| format!("class{c}"))).unwrap()
}

/// Random row-normalized score matrix. Every third matrix draws from a
/// coarse grid so exact ties (in scores and in deltas) are common.
fn random_matrix(rng: &mut ChaCha8Rng, trial: usize) -> (Vec<Vec<f64>>, usize) {
    let rows = rng.gen_range(1..=200);
    let k = rng.gen_range(2..=10);
    let coarse = trial.is_multiple_of(3);
    let matrix = (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..k)
                .map(|_| {
                    if coarse {
                        rng.gen_range(1..=4) as f64
                    } else {
                        rng.gen_range(1e-6..1.0)
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total).collect()
        })
        .collect();
    (matrix, k)
}

fn matrix_of(rows: &[Vec<f64>], k: usize) -> ScoreMatrix {
    let ids = (0..rows.len()).map(|i| format!("u{i}")).collect();
    ScoreMatrix::from_rows(ids, class_set(k), rows).unwrap()
}

/// Brute force: per class, all rows it wins (first maximum), ordered by
/// margin descending then row index, first `n` kept.
fn brute_force_selection(rows: &[Vec<f64>], k: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); k];
    for (i, row) in rows.iter().enumerate() {
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        let mut second: Option<usize> = None;
        for c in 0..k {
            if c != best && second.is_none_or(|s| row[c] > row[s]) {
                second = Some(c);
            }
        }
        let delta = row[best] - row[second.unwrap()];
        out[best].push((i, delta));
    }
    for list in &mut out {
        let mut sorted = Vec::new();
        while !list.is_empty() && sorted.len() < n {
            let mut pick = 0;
            for j in 1..list.len() {
                let (ri, di) = list[j];
                let (rp, dp) = list[pick];
                if di > dp || (di == dp && ri < rp) {
                    pick = j;
                }
            }
            sorted.push(list.remove(pick));
        }
        *list = sorted;
    }
    out
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 1000;
    for trial in 0..trials {
        let (rows, k) = random_matrix(&mut rng, trial);
        let n = rng.gen_range(1..=rows.len());
        let got = select_positives(&matrix_of(&rows, k), n).map_err(|e| e.to_string())?;
        let expected = brute_force_selection(&rows, k, n);
        for (c, want) in expected.iter().enumerate() {
            let got_c: Vec<(usize, f64)> = got.per_class[c].iter().map(|s| (s.row, s.delta)).collect();
            ensure(got_c == *want, || format!("trial {trial}, class {c}: {got_c:?} != {want:?}"))?;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{trials} matrices in {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut positives_checked = 0usize;
    for trial in 0..300 {
        // Continuous scores: second-ranked class and argmin are unique.
        let (rows, k) = random_matrix(&mut rng, 3 * trial + 1);
        let matrix = matrix_of(&rows, k);
        let n = rng.gen_range(1..=rows.len());
        let positives = select_positives(&matrix, n).map_err(|e| e.to_string())?;
        for strategy in [
            ContrastStrategy::Random,
            ContrastStrategy::Closest,
            ContrastStrategy::Furthest,
            ContrastStrategy::All,
        ] {
            let negatives = generate_negatives(&positives, &matrix, strategy, trial as u64)
                .map_err(|e| e.to_string())?;
            let per = if strategy == ContrastStrategy::All { k - 1 } else { 1 };
            ensure(negatives.len() == positives.len() * per, || {
                format!("{strategy}: {} negatives for {} positives", negatives.len(), positives.len())
            })?;
            let mut cursor = 0;
            for (c, sel) in positives.iter() {
                let chunk = &negatives[cursor..cursor + per];
                cursor += per;
                let row = &rows[sel.row];
                let positive = format!("class{c}");
                let mut names: Vec<&str> = chunk.iter().map(|p| p.negative_class.as_str()).collect();
                ensure(
                    chunk.iter().all(|p| p.example_id == sel.example_id && p.positive_class == positive),
                    || format!("{strategy}: negative not aligned with its positive"),
                )?;
                ensure(!names.contains(&positive.as_str()), || {
                    format!("{strategy}: positive class reused as negative")
                })?;
                match strategy {
                    ContrastStrategy::Closest => {
                        let mut order: Vec<usize> = (0..k).collect();
                        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
                        ensure(names[0] == format!("class{}", order[1]), || {
                            format!("closest chose {} not class{}", names[0], order[1])
                        })?;
                    }
                    ContrastStrategy::Furthest => {
                        let argmin = (0..k).min_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                        ensure(names[0] == format!("class{argmin}"), || {
                            format!("furthest chose {} not class{argmin}", names[0])
                        })?;
                    }
                    ContrastStrategy::All => {
                        names.sort();
                        names.dedup();
                        ensure(names.len() == k - 1, || "duplicate negatives".to_string())?;
                    }
                    ContrastStrategy::Random => {}
                }
                positives_checked += 1;
            }
        }
    }
    Ok(format!("{positives_checked} positive×strategy checks"))
}

const GOLDEN_PREMISE: &str = "I'm thrilled my paper got accepted to the conference!";

fn criterion_3a(path: &Path) -> Outcome {
    let store = load_embeddings(path).map_err(|e| e.to_string())?;
    let masker = Masker::new(&store, "<unk>");
    let got = masker.mask(GOLDEN_PREMISE, "joy");
    let token = got.masked.as_ref().map(|m| m.token.as_str());
    ensure(token == Some("thrilled"), || format!("masked {token:?}"))?;
    Ok(format!("\"{}\"", got.masked_text))
}

fn criterion_3b() -> Outcome {
    let store = load_embeddings(&fixture("mask_embeddings.txt")).map_err(|e| e.to_string())?;
    let masker = Masker::new(&store, "<unk>");
    let cases = std::fs::read_to_string(fixture("mask_cases.jsonl")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for line in cases.lines() {
        let case: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let text = case["text"].as_str().unwrap();
        let class = case["class"].as_str().unwrap();
        let got = masker.mask(text, class);
        let expected = case["expected"]["token"].as_str();
        let token = got.masked.as_ref().map(|m| m.token.as_str());
        ensure(token == expected, || format!("{text:?}/{class}: {token:?} != {expected:?}"))?;
        if let Some(masked_text) = case["expected"]["masked_text"].as_str() {
            ensure(got.masked_text == masked_text, || format!("{text:?}: {}", got.masked_text))?;
        }
        n += 1;
    }
    ensure(n == 20, || format!("{n} cases"))?;
    Ok(format!("{n} fixture cases"))
}

fn self_train_config(seed: u64) -> SelfTrainConfig {
    SelfTrainConfig {
        per_class_fraction: 0.05,
        iterations: 2,
        contrast_strategy: ContrastStrategy::Random,
        masking_enabled: true,
        seed,
        fine_tune: FineTuneSpec {
            learning_rate: 0.3,
            batch_size: 8,
            ..Default::default()
        },
    }
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let template = HypothesisTemplate::default();
    let mut summary = Vec::new();
    for seed in 0..5u64 {
        let world = SyntheticWorld::generate(&SyntheticSpec::default(), seed).map_err(|e| e.to_string())?;
        ensure(world.unlabeled.len() == 500 && world.test.len() == 200, || "wrong split sizes".into())?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = Arc::new(world.store);
        let backend = MockBackend::new(Arc::clone(&store), template.clone(), RunDir::checkpoint_root(tmp.path()));
        let base = backend.init(world.initial_state.clone()).map_err(|e| e.to_string())?;
        let run = RunDir::open(tmp.path()).map_err(|e| e.to_string())?;
        let (last, _) = SelfTrainer::new(&backend, &run)
            .with_embeddings(&store)
            .run_self_training(&base, &world.unlabeled, &world.classes, &template, &self_train_config(seed), false)
            .map_err(|e| e.to_string())?;
        let acc = |m| {
            evaluate_accuracy(&backend, m, &world.test, &world.classes, &template, "", seed)
                .map(|r| r.accuracy)
                .map_err(|e| e.to_string())
        };
        let (before, after) = (acc(&base)?, acc(&last)?);
        ensure((0.55..=0.75).contains(&before), || {
            format!("seed {seed}: initial accuracy {before:.3} outside [0.55, 0.75]")
        })?;
        ensure(after - before >= 0.05, || {
            format!("seed {seed}: {before:.3} -> {after:.3}")
        })?;
        summary.push(format!("{before:.3}->{after:.3}"));
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{} in {:.1}s", summary.join(", "), elapsed.as_secs_f64()))
}

fn criterion_5() -> Outcome {
    let template = HypothesisTemplate::default();
    let spec = SyntheticSpec::default();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let world = SyntheticWorld::generate(&spec, 42).map_err(|e| e.to_string())?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = Arc::new(world.store);
        let backend = MockBackend::new(Arc::clone(&store), template.clone(), RunDir::checkpoint_root(tmp.path()));
        let base = backend.init(world.initial_state.clone()).map_err(|e| e.to_string())?;
        let run = RunDir::open(tmp.path()).map_err(|e| e.to_string())?;
        let config = self_train_config(42);
        SelfTrainer::new(&backend, &run)
            .with_embeddings(&store)
            .run_self_training(&base, &world.unlabeled, &world.classes, &template, &config, false)
            .map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for k in 1..=config.iterations {
            for name in ["pseudo_labels.jsonl", "pairs.jsonl"] {
                let path = run.iteration_dir(k).join(name);
                files.push((format!("iter_{k}/{name}"), std::fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
        runs.push(files);
    }
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        ensure(!a.is_empty(), || format!("{name} is empty"))?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical", runs[0].len()))
}

fn criterion_6() -> Outcome {
    let path = fixture("stats_reference.json");
    let refs: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let rel = |got: f64, want: f64| (got - want).abs() <= 1e-9 * want.abs();
    let floats = |v: &Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    for r in &refs {
        let name = r["name"].as_str().unwrap();
        let (a, b) = (floats(&r["a"]), floats(&r["b"]));
        let t = paired_ttest(&a, &b).map_err(|e| e.to_string())?;
        for (label, got, want) in [
            ("t", t.t, r["t"].as_f64().unwrap()),
            ("p", t.p, r["p"].as_f64().unwrap()),
            ("sem", sem(&a), r["sem_a"].as_f64().unwrap()),
            ("mean", mean(&a), r["mean_a"].as_f64().unwrap()),
        ] {
            ensure(rel(got, want), || format!("{name}: {label} {got} vs reference {want}"))?;
        }
    }
    let trials = 1000;
    let rate = null_rejection_rate(trials, 5, 0.05, 2024).map_err(|e| e.to_string())?;
    let sd = (0.05f64 * 0.95 / trials as f64).sqrt();
    ensure((rate - 0.05).abs() < 3.0 * sd, || format!("null rejection rate {rate}"))?;
    Ok(format!("{} reference cases, null rejection rate {rate:.3}", refs.len()))
}

#[test]
fn criterion_1_selection_matches_brute_force() {
    check("1", "selection oracle equivalence", criterion_1);
}

#[test]
fn criterion_2_strategy_cardinality_and_identity() {
    check("2", "contrast strategy cardinality and identity", criterion_2);
}

/// Reports 3a. Without embeddings the line reads FAIL (blocked); the strict
/// variant below is the one that fails the build.
#[test]
fn criterion_3a_golden_mask_status() {
    match std::env::var_os("SELFTRAIN_EMBEDDINGS") {
        Some(path) => check("3a", "golden mask with pretrained embeddings", || criterion_3a(Path::new(&path))),
        None => report(
            "3a",
            "golden mask with pretrained embeddings",
            &Err("blocked: SELFTRAIN_EMBEDDINGS is not set; no pretrained vectors available".into()),
        ),
    }
}

#[test]
#[ignore = "needs pretrained embeddings at SELFTRAIN_EMBEDDINGS"]
fn criterion_3a_golden_mask_strict() {
    let path = std::env::var_os("SELFTRAIN_EMBEDDINGS").expect("SELFTRAIN_EMBEDDINGS is not set");
    check("3a", "golden mask with pretrained embeddings", || criterion_3a(Path::new(&path)));
}

#[test]
fn criterion_3b_masking_fixture() {
    check("3b", "masking fixture cases", criterion_3b);
}

#[test]
fn criterion_4_mock_end_to_end_improvement() {
    check("4", "mock end-to-end improvement", criterion_4);
}

#[test]
fn criterion_5_determinism() {
    check("5", "byte-identical artifacts", criterion_5);
}

#[test]
fn criterion_6_statistics() {
    check("6", "statistics against reference and calibration", criterion_6);
}

#[test]
fn criterion_7_full_scale_tier() {
    let _ = writeln!(
        std::io::stderr(),
        "acceptance 7: SKIP  full-scale reproduction (optional tier; needs GPU and NLI models, not run)"
    );
}
