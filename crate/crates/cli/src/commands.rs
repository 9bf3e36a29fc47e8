use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use selftrain::backend::{MockBackend, MockState, SubprocessBackend};
use selftrain::datasets::{sample_unlabeled, CorpusRole};
use selftrain::eval::{build_report, cross_task_matrix, evaluate_accuracy, EvalResult, Pooling, Report};
use selftrain::manifest::RunManifest;
use selftrain::masking::{load_embeddings, EmbeddingStore};
use selftrain::selftrain::{RunDir, SelfTrainer};
use selftrain::{Backend, ClassSet, Corpus, ModelHandle, Registry};
use serde_json::{json, Value};

use crate::settings::{BackendSettings, Settings};
use crate::CliError;

/// Environment variable naming a GloVe/word2vec text file.
pub const EMBEDDINGS_ENV: &str = "SELFTRAIN_EMBEDDINGS";

pub fn embeddings() -> Result<Option<Arc<EmbeddingStore>>, CliError> {
    match std::env::var_os(EMBEDDINGS_ENV) {
        Some(path) if !path.is_empty() => {
            log::info!("loading embeddings from {}", Path::new(&path).display());
            Ok(Some(Arc::new(load_embeddings(Path::new(&path))?)))
        }
        _ => Ok(None),
    }
}

fn require_embeddings(store: &Option<Arc<EmbeddingStore>>, why: &str) -> Result<Arc<EmbeddingStore>, CliError> {
    store
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{why} needs word embeddings; set {EMBEDDINGS_ENV}")))
}

pub fn registry(settings: &Settings) -> Result<Registry, CliError> {
    let mut registry = Registry::builtin();
    if let Some(path) = &settings.registry {
        registry.load_file(path)?;
    }
    Ok(registry)
}

fn dataset_id(settings: &Settings) -> Result<&str, CliError> {
    settings
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset configured (set `dataset` or pass --dataset)".into()))
}

fn classes(settings: &Settings) -> Result<ClassSet, CliError> {
    Ok(registry(settings)?.get(dataset_id(settings)?)?.clone())
}

fn test_corpus(settings: &Settings) -> Result<Option<Corpus>, CliError> {
    match &settings.test {
        Some(src) => Ok(Some(src.load(CorpusRole::Test, dataset_id(settings)?)?)),
        None => Ok(None),
    }
}

fn unlabeled_corpus(settings: &Settings) -> Result<Corpus, CliError> {
    let src = settings
        .unlabeled
        .as_ref()
        .ok_or_else(|| CliError::Usage("no unlabeled corpus configured (`unlabeled.path`)".into()))?;
    let corpus = src.load(CorpusRole::Unlabeled, dataset_id(settings)?)?;
    match settings.max_unlabeled {
        Some(max) => Ok(sample_unlabeled(&corpus, max, settings.self_train.seed)?),
        None => Ok(corpus),
    }
}

/// A backend plus its base model.
pub struct Scorer {
    pub backend: Box<dyn Backend>,
    pub base: ModelHandle,
}

pub fn scorer(
    settings: &Settings,
    store: &Option<Arc<EmbeddingStore>>,
    checkpoint_root: &Path,
) -> Result<Scorer, CliError> {
    match &settings.backend {
        BackendSettings::Mock { state, scale } => {
            let store = require_embeddings(store, "the mock backend")?;
            let initial = match state {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Usage(format!("cannot read mock state {}: {e}", path.display())))?;
                    serde_json::from_str::<MockState>(&text)
                        .map_err(|e| CliError::Usage(format!("mock state {}: {e}", path.display())))?
                }
                None => MockState::new(*scale),
            };
            let backend = MockBackend::new(store, settings.template.clone(), checkpoint_root);
            let base = backend.init(initial)?;
            Ok(Scorer {
                backend: Box::new(backend),
                base,
            })
        }
        BackendSettings::Subprocess(cfg) => {
            let backend = SubprocessBackend::spawn(cfg.clone(), checkpoint_root)?;
            let base = backend.base_model();
            Ok(Scorer {
                backend: Box::new(backend),
                base,
            })
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn effective(settings: &Settings) -> Value {
    serde_json::to_value(settings).expect("settings serialize")
}

fn evaluate(
    scorer: &Scorer,
    model: &ModelHandle,
    test: &Corpus,
    classes: &ClassSet,
    settings: &Settings,
    tag: &str,
) -> Result<EvalResult, CliError> {
    let r = evaluate_accuracy(
        scorer.backend.as_ref(),
        model,
        test,
        classes,
        &settings.template,
        tag,
        settings.self_train.seed,
    )?;
    log::info!("{tag}: accuracy {:.4} on {} examples", r.accuracy, r.n_examples);
    Ok(r)
}

fn results_report(command: &str, settings: &Settings, results: &[EvalResult]) -> Value {
    json!({
        "command": command,
        "config": effective(settings),
        "results": results,
    })
}

pub fn eval_zero_shot(settings: &Settings, out: &Path) -> Result<Vec<EvalResult>, CliError> {
    let classes = classes(settings)?;
    let test = test_corpus(settings)?
        .ok_or_else(|| CliError::Usage("no test corpus configured (`test.path`)".into()))?;
    let store = embeddings()?;
    let scorer = scorer(settings, &store, &out.join("checkpoints"))?;
    let result = evaluate(&scorer, &scorer.base, &test, &classes, settings, "zero_shot")?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "eval-zero-shot",
            "dataset_id": classes.dataset_id(),
            "template": settings.template,
            "base_model": scorer.base,
            "config": effective(settings),
            "created_at": selftrain::manifest::now_rfc3339(),
        }),
    )?;
    let results = vec![result];
    write_json(&out.join("report.json"), &results_report("eval-zero-shot", settings, &results))?;
    Ok(results)
}

/// Self-train into `run_dir`, evaluating the base model and every iteration
/// when a test set is configured.
pub fn self_train(settings: &Settings, run_dir: &Path, resume: bool) -> Result<Vec<EvalResult>, CliError> {
    let classes = classes(settings)?;
    let unlabeled = unlabeled_corpus(settings)?;
    let test = test_corpus(settings)?;
    let store = embeddings()?;
    let run = RunDir::open(run_dir)?;
    let scorer = scorer(settings, &store, &RunDir::checkpoint_root(run_dir))?;
    let mut trainer = SelfTrainer::new(scorer.backend.as_ref(), &run);
    if let Some(s) = &store {
        trainer = trainer.with_embeddings(s.as_ref());
    }

    let base_result = match &test {
        Some(t) => Some(evaluate(&scorer, &scorer.base, t, &classes, settings, "zero_shot")?),
        None => None,
    };
    let config = effective(settings);
    let (_, manifest) = trainer.run_with_hook(
        &scorer.base,
        &unlabeled,
        &classes,
        &settings.template,
        &settings.self_train,
        resume,
        |artifact, manifest| {
            manifest.extra.insert("effective_config".into(), config.clone());
            if let Some(b) = &base_result {
                manifest.base_metrics.insert("test_accuracy".into(), b.accuracy);
            }
            if let Some(t) = &test {
                let tag = format!("iter_{}", artifact.iteration);
                let r = evaluate(&scorer, &artifact.output_model, t, &classes, settings, &tag)
                    .map_err(|e| selftrain::Error::Storage(e.to_string()))?;
                let record = manifest.iterations.last_mut().expect("record pushed before hook");
                record.metrics.insert("test_accuracy".into(), r.accuracy);
            }
            Ok(())
        },
    )?;

    let mut results: Vec<EvalResult> = base_result.into_iter().collect();
    for record in &manifest.iterations {
        if let Some(acc) = record.metrics.get("test_accuracy") {
            let last = record.iteration == settings.self_train.iterations;
            let n = test.as_ref().map_or(0, Corpus::len);
            results.push(EvalResult {
                dataset_id: classes.dataset_id().to_string(),
                model_tag: if last { "self_trained".into() } else { format!("iter_{}", record.iteration) },
                accuracy: *acc,
                correct: (acc * n as f64).round() as usize,
                n_examples: n,
                seed: settings.self_train.seed,
            });
        }
    }
    write_json(&run_dir.join("report.json"), &results_report("self-train", settings, &results))?;
    Ok(results)
}

/// Paired masked/unmasked self-training over `seeds`.
pub fn ablate_masking(settings: &Settings, out: &Path, seeds: &[u64], pooling: Pooling) -> Result<Report, CliError> {
    if settings.test.is_none() {
        return Err(CliError::Usage("the masking ablation needs a test corpus (`test.path`)".into()));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        for (masked, tag) in [(true, "masked"), (false, "unmasked")] {
            let mut variant = settings.clone();
            variant.self_train.seed = seed;
            variant.self_train.masking_enabled = masked;
            let dir = out.join(tag).join(format!("seed_{seed}"));
            let run = self_train(&variant, &dir, false)?;
            let last = run
                .into_iter()
                .find(|r| r.model_tag == "self_trained")
                .ok_or_else(|| CliError::Internal(format!("{} has no final evaluation", dir.display())))?;
            results.push(EvalResult {
                model_tag: tag.into(),
                ..last
            });
        }
    }
    let report = build_report(&results, Some(("masked", "unmasked")), pooling)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "command": "ablate-masking",
            "config": effective(settings),
            "seeds": seeds,
            "results": results,
            "report": report,
        }),
    )?;
    write_text(&out.join("report.md"), &report.to_markdown())?;
    Ok(report)
}

pub fn heuristic_baseline(settings: &Settings, run_dir: &Path) -> Result<Vec<EvalResult>, CliError> {
    let classes = classes(settings)?;
    let unlabeled = unlabeled_corpus(settings)?;
    let test = test_corpus(settings)?;
    let store = embeddings()?;
    let embed = require_embeddings(&store, "the heuristic baseline")?;
    let run = RunDir::open(run_dir)?;
    let scorer = scorer(settings, &store, &RunDir::checkpoint_root(run_dir))?;
    let artifact = SelfTrainer::new(scorer.backend.as_ref(), &run)
        .with_embeddings(&embed)
        .run_heuristic_baseline(&scorer.base, &unlabeled, &classes, &settings.template, &settings.self_train)?;
    let mut results = Vec::new();
    if let Some(t) = &test {
        results.push(evaluate(&scorer, &scorer.base, t, &classes, settings, "zero_shot")?);
        results.push(evaluate(&scorer, &artifact.output_model, t, &classes, settings, "heuristic")?);
    }
    write_json(
        &run_dir.join("baseline.json"),
        &json!({
            "command": "heuristic-baseline",
            "config": effective(settings),
            "record": artifact.record,
            "output_model": artifact.output_model,
        }),
    )?;
    write_json(&run_dir.join("report.json"), &results_report("heuristic-baseline", settings, &results))?;
    Ok(results)
}

/// Link every run's checkpoints into one directory so a single backend can
/// load them all. Checkpoints are content-addressed, so duplicates are the
/// same state.
fn merged_checkpoints(runs: &[PathBuf], into: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(into).map_err(|e| CliError::io(into, e))?;
    for run in runs {
        let root = RunDir::checkpoint_root(run);
        let Ok(entries) = std::fs::read_dir(&root) else { continue };
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&root, e))?;
            let target = into.join(entry.file_name());
            if target.exists() {
                continue;
            }
            let source = std::fs::canonicalize(entry.path()).map_err(|e| CliError::io(entry.path(), e))?;
            symlink(&source, &target).map_err(|e| CliError::io(&target, e))?;
        }
    }
    Ok(())
}

#[cfg(unix)]
fn symlink(source: &Path, target: &Path) -> std::io::Result<()> {
    std::os::unix::fs::symlink(source, target)
}

#[cfg(not(unix))]
fn symlink(source: &Path, target: &Path) -> std::io::Result<()> {
    if source.is_dir() {
        std::fs::create_dir_all(target)?;
        for entry in std::fs::read_dir(source)? {
            let entry = entry?;
            std::fs::copy(entry.path(), target.join(entry.file_name()))?;
        }
        Ok(())
    } else {
        std::fs::copy(source, target).map(|_| ())
    }
}

/// Parse `id=path` evaluation-set arguments.
pub fn parse_evalset(arg: &str) -> Result<(String, PathBuf), CliError> {
    let (id, path) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--evalset expects id=path, got `{arg}`")))?;
    Ok((id.trim().to_string(), PathBuf::from(path)))
}

pub fn cross_eval(
    settings: &Settings,
    runs: &[PathBuf],
    evalsets: &[(String, PathBuf)],
    out: &Path,
) -> Result<selftrain::eval::CrossTaskMatrix, CliError> {
    let registry = registry(settings)?;
    let mut models: BTreeMap<String, Option<ModelHandle>> = BTreeMap::new();
    let mut base: Option<ModelHandle> = None;
    for run in runs {
        if !RunManifest::exists(run) {
            log::warn!("{} has no manifest; its row is left empty", run.display());
            let id = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into());
            models.entry(id).or_insert(None);
            continue;
        }
        let manifest = RunManifest::load(run)?;
        match &base {
            None => base = Some(manifest.base_model.clone()),
            Some(b) if *b != manifest.base_model => {
                return Err(CliError::Usage(format!(
                    "{} starts from {} but earlier runs start from {b}",
                    run.display(),
                    manifest.base_model
                )))
            }
            Some(_) => {}
        }
        if models.contains_key(&manifest.dataset_id) {
            return Err(CliError::Usage(format!("two runs self-trained on `{}`", manifest.dataset_id)));
        }
        let model = if manifest.is_complete() {
            Some(manifest.latest_model().clone())
        } else {
            log::warn!("{} is incomplete; its row is left empty", run.display());
            None
        };
        models.insert(manifest.dataset_id.clone(), model);
    }
    let mut corpora = BTreeMap::new();
    for (id, path) in evalsets {
        let src = selftrain::datasets::CorpusSource {
            path: path.clone(),
            format: None,
        };
        corpora.insert(id.clone(), src.load(CorpusRole::Test, id)?);
    }

    let store = embeddings()?;
    let scratch = tempfile_dir(out)?;
    merged_checkpoints(runs, &scratch)?;
    let scorer = scorer(settings, &store, &scratch)?;
    let base = base.unwrap_or_else(|| scorer.base.clone());
    let matrix = cross_task_matrix(scorer.backend.as_ref(), &base, &models, &corpora, &registry, &settings.template);
    let _ = std::fs::remove_dir_all(&scratch);
    let matrix = matrix?;
    write_text(out, &matrix.to_csv())?;
    Ok(matrix)
}

fn tempfile_dir(out: &Path) -> Result<PathBuf, CliError> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let dir = parent.join(format!(".selftrain-cross-eval-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    Ok(dir)
}

/// Collect `EvalResult`s from report files (`{"results": [...]}`) or bare
/// JSON arrays of results.
pub fn load_results(paths: &[PathBuf]) -> Result<Vec<EvalResult>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let list = match value {
            Value::Array(_) => value,
            Value::Object(mut map) => map
                .remove("results")
                .ok_or_else(|| CliError::Usage(format!("{} has no `results`", path.display())))?,
            _ => return Err(CliError::Usage(format!("{}: expected results", path.display()))),
        };
        let results: Vec<EvalResult> =
            serde_json::from_value(list).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        out.extend(results);
    }
    Ok(out)
}

pub fn report(
    inputs: &[PathBuf],
    comparison: Option<(&str, &str)>,
    pooling: Pooling,
    out: &Path,
) -> Result<Report, CliError> {
    let results = load_results(inputs)?;
    if results.is_empty() {
        return Err(CliError::Usage("no results to report".into()));
    }
    let report = build_report(&results, comparison, pooling)?;
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.md"), &report.to_markdown())?;
    Ok(report)
}
