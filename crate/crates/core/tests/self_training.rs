use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use selftrain::backend::{MockBackend, MockState};
use selftrain::config::FineTuneSpec;
use selftrain::eval::evaluate_accuracy;
use selftrain::manifest::RunManifest;
use selftrain::masking::EmbeddingStore;
use selftrain::selftrain::{RunDir, SelfTrainer};
use selftrain::synthetic::{SyntheticSpec, SyntheticWorld};
use selftrain::{
    Backend, BackendKind, ClassSet, ContrastStrategy, Corpus, Error, HypothesisTemplate, ModelHandle,
    NliTrainingPair, SelfTrainConfig,
};

fn world(seed: u64) -> SyntheticWorld {
    let spec = SyntheticSpec {
        unlabeled: 120,
        test: 80,
        ..SyntheticSpec::default()
    };
    SyntheticWorld::generate(&spec, seed).unwrap()
}

fn config(strategy: ContrastStrategy, iterations: u32) -> SelfTrainConfig {
    SelfTrainConfig {
        per_class_fraction: 0.05,
        iterations,
        contrast_strategy: strategy,
        masking_enabled: true,
        seed: 11,
        fine_tune: FineTuneSpec {
            learning_rate: 0.3,
            batch_size: 8,
            ..Default::default()
        },
    }
}

struct Setup {
    world: World,
    store: Arc<EmbeddingStore>,
    backend: MockBackend,
    base: ModelHandle,
}

struct World {
    classes: ClassSet,
    unlabeled: Corpus,
    initial_state: MockState,
}

fn setup(seed: u64, run: &Path) -> Setup {
    let w = world(seed);
    let store = Arc::new(w.store);
    let world = World {
        classes: w.classes,
        unlabeled: w.unlabeled,
        initial_state: w.initial_state,
    };
    let backend = MockBackend::new(Arc::clone(&store), HypothesisTemplate::default(), RunDir::checkpoint_root(run));
    let base = backend.init(world.initial_state.clone()).unwrap();
    Setup {
        world,
        store,
        backend,
        base,
    }
}

/// Delegates to an inner backend but fails the `fail_at`-th fine-tune call.
struct Flaky<'a> {
    inner: &'a dyn Backend,
    calls: AtomicUsize,
    fail_at: usize,
}

impl Backend for Flaky<'_> {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }
    fn unk_token(&self) -> &str {
        self.inner.unk_token()
    }
    fn score_entailment(&self, model: &ModelHandle, premise: &str, hypotheses: &[String]) -> selftrain::Result<Vec<f64>> {
        self.inner.score_entailment(model, premise, hypotheses)
    }
    fn fine_tune(
        &self,
        model: &ModelHandle,
        pairs: &[NliTrainingPair],
        spec: &FineTuneSpec,
        seed: u64,
    ) -> selftrain::Result<ModelHandle> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.fail_at {
            return Err(Error::Transport("simulated crash".into()));
        }
        self.inner.fine_tune(model, pairs, spec, seed)
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn lineage_runs_base_to_second_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(0, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let cfg = config(ContrastStrategy::Random, 2);
    let (last, manifest) = trainer
        .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &cfg, false)
        .unwrap();

    assert_eq!(manifest.iterations.len(), 2);
    let first = &manifest.iterations[0];
    let second = &manifest.iterations[1];
    assert_eq!(first.input_model, s.base);
    assert_eq!(second.input_model, first.output_model);
    assert_eq!(second.output_model, last);
    assert_eq!(last.generation(), 2);
    assert_eq!(last.lineage[0], s.base.state_ref);
    assert_eq!(last.parent_ref(), Some(first.output_model.state_ref.as_str()));
    assert!(manifest.is_complete());

    for k in 1..=2 {
        let dir = run.iteration_dir(k);
        for f in ["scores.bin", "pseudo_labels.jsonl", "pairs.jsonl", "masks.jsonl", "checkpoint/handle.json"] {
            assert!(dir.join(f).is_file(), "missing {f} in iteration {k}");
        }
    }
    // Base state untouched by fine-tuning.
    let again = s.backend.init(s.world.initial_state.clone()).unwrap();
    assert_eq!(again, s.base);
}

#[test]
fn random_strategy_pairs_one_negative_per_positive() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(1, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let cfg = config(ContrastStrategy::Random, 1);
    let a = trainer
        .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &cfg, 1)
        .unwrap();
    let n = cfg.resolve_n(s.world.unlabeled.len());
    assert_eq!(a.record.n, n);
    assert!(a.record.positives <= n * s.world.classes.len());
    assert_eq!(a.record.entail_pairs, a.record.positives);
    assert_eq!(a.record.contradict_pairs, a.record.positives);
}

#[test]
fn all_strategy_respects_counting_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(2, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let cfg = config(ContrastStrategy::All, 1);
    let a = trainer
        .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &cfg, 1)
        .unwrap();
    let c = s.world.classes.len();
    let n = a.record.n;
    let total = a.record.entail_pairs + a.record.contradict_pairs;
    assert_eq!(a.record.contradict_pairs, a.record.positives * (c - 1));
    assert!(total <= n * c * c, "{total} > {n}·{c}²");

    let lines = String::from_utf8(read(&a.pairs_path)).unwrap();
    assert_eq!(lines.lines().count(), total);
}

#[test]
fn identical_inputs_give_identical_artifacts() {
    let mut files = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let s = setup(3, tmp.path());
        let run = RunDir::open(tmp.path()).unwrap();
        let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
        let cfg = config(ContrastStrategy::Random, 2);
        trainer
            .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &cfg, false)
            .unwrap();
        let mut got = Vec::new();
        for k in 1..=2 {
            for f in ["scores.bin", "pseudo_labels.jsonl", "pairs.jsonl", "masks.jsonl"] {
                got.push(read(&run.iteration_dir(k).join(f)));
            }
        }
        let m = RunManifest::load(tmp.path()).unwrap();
        got.push(m.latest_model().state_ref.clone().into_bytes());
        files.push(got);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn different_seeds_change_random_negatives() {
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();
    let mut pairs = Vec::new();
    for (tmp, seed) in [(&tmp_a, 1u64), (&tmp_b, 2)] {
        let s = setup(4, tmp.path());
        let run = RunDir::open(tmp.path()).unwrap();
        let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
        let cfg = SelfTrainConfig {
            seed,
            ..config(ContrastStrategy::Random, 1)
        };
        let a = trainer
            .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &cfg, 1)
            .unwrap();
        pairs.push(read(&a.pairs_path));
    }
    assert_ne!(pairs[0], pairs[1]);
}

#[test]
fn crash_then_resume_matches_uninterrupted_run() {
    let template = HypothesisTemplate::default();
    let cfg = config(ContrastStrategy::Closest, 3);

    let clean = tempfile::tempdir().unwrap();
    let reference = {
        let s = setup(5, clean.path());
        let run = RunDir::open(clean.path()).unwrap();
        let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
        trainer
            .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &cfg, false)
            .unwrap()
            .0
    };

    let tmp = tempfile::tempdir().unwrap();
    let s = setup(5, tmp.path());
    {
        let flaky = Flaky {
            inner: &s.backend,
            calls: AtomicUsize::new(0),
            fail_at: 2,
        };
        let run = RunDir::open(tmp.path()).unwrap();
        let trainer = SelfTrainer::new(&flaky, &run).with_embeddings(&s.store);
        let err = trainer
            .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &cfg, false)
            .unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }
    let partial = RunManifest::load(tmp.path()).unwrap();
    assert_eq!(partial.iterations.len(), 1);
    assert!(!partial.is_complete());

    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let fresh_err = trainer
        .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &cfg, false)
        .unwrap_err();
    assert!(matches!(fresh_err, Error::ResumeMismatch(_)));

    let (resumed, manifest) = trainer
        .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &cfg, true)
        .unwrap();
    assert_eq!(manifest.iterations.len(), 3);
    assert_eq!(resumed, reference);
    for k in 1..=3 {
        assert_eq!(
            read(&run.iteration_dir(k).join("pairs.jsonl")),
            read(&clean.path().join(format!("iter_{k}")).join("pairs.jsonl"))
        );
    }
}

#[test]
fn resume_rejects_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(6, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let template = HypothesisTemplate::default();
    trainer
        .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &config(ContrastStrategy::Random, 1), false)
        .unwrap();
    let err = trainer
        .run_self_training(&s.base, &s.world.unlabeled, &s.world.classes, &template, &config(ContrastStrategy::All, 1), true)
        .unwrap_err();
    assert!(matches!(err, Error::ResumeMismatch(_)), "{err}");
}

#[test]
fn masking_needs_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(7, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run);
    let err = trainer
        .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &config(ContrastStrategy::Random, 1), 1)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let off = SelfTrainConfig {
        masking_enabled: false,
        ..config(ContrastStrategy::Random, 1)
    };
    let a = trainer
        .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &off, 1)
        .unwrap();
    assert_eq!(a.record.masked_premises, 0);
}

#[test]
fn masked_premises_contain_unk_and_hypothesis_names_class() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(8, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let a = trainer
        .run_iteration(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &config(ContrastStrategy::Furthest, 1), 1)
        .unwrap();
    assert!(a.record.masked_premises > 0);
    let text = String::from_utf8(read(&a.pairs_path)).unwrap();
    let unk = s.backend.unk_token();
    let mut entail = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let premise = v["premise"].as_str().unwrap();
        let hypothesis = v["hypothesis"].as_str().unwrap();
        assert!(hypothesis.starts_with("This example is "), "{hypothesis}");
        if v["label"] == "entail" {
            entail += 1;
            assert_eq!(premise.matches(unk).count(), 1, "{premise}");
        }
    }
    assert_eq!(entail, a.record.entail_pairs);
}

#[test]
fn self_training_improves_a_miscalibrated_scorer() {
    let spec = SyntheticSpec::default();
    let w = SyntheticWorld::generate(&spec, 2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let store = Arc::new(w.store);
    let template = HypothesisTemplate::default();
    let backend = MockBackend::new(Arc::clone(&store), template.clone(), RunDir::checkpoint_root(tmp.path()));
    let base = backend.init(w.initial_state.clone()).unwrap();
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&backend, &run).with_embeddings(&store);
    let (last, _) = trainer
        .run_self_training(&base, &w.unlabeled, &w.classes, &template, &config(ContrastStrategy::Random, 2), false)
        .unwrap();
    let before = evaluate_accuracy(&backend, &base, &w.test, &w.classes, &template, "base", 0).unwrap();
    let after = evaluate_accuracy(&backend, &last, &w.test, &w.classes, &template, "st", 0).unwrap();
    assert!(after.accuracy >= before.accuracy + 0.05, "{} -> {}", before.accuracy, after.accuracy);
}

#[test]
fn heuristic_baseline_trains_one_round() {
    let tmp = tempfile::tempdir().unwrap();
    let s = setup(9, tmp.path());
    let run = RunDir::open(tmp.path()).unwrap();
    let trainer = SelfTrainer::new(&s.backend, &run).with_embeddings(&s.store);
    let a = trainer
        .run_heuristic_baseline(&s.base, &s.world.unlabeled, &s.world.classes, &HypothesisTemplate::default(), &config(ContrastStrategy::Random, 1))
        .unwrap();
    assert_eq!(a.output_model.generation(), 1);
    assert!(a.record.positives > 0);
    assert_eq!(a.record.entail_pairs, a.record.contradict_pairs);
    let labels = String::from_utf8(read(&a.pseudo_labels_path)).unwrap();
    assert_eq!(labels.lines().count(), a.record.positives);
}
