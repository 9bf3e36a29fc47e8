//! The self-training loop: score, select, mask, pair, fine-tune, repeat.
//!
//! Every iteration writes its artifacts under `iter_<k>/` in the run
//! directory before fine-tuning starts, so a failed iteration can be
//! inspected and the run resumed from the last completed one.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use crate::backend::{Backend, ModelHandle, NliLabel, NliTrainingPair};
use crate::config::{ClassSet, ContrastStrategy, HypothesisTemplate, SelfTrainConfig};
use crate::datasets::{Corpus, CorpusRole};
use crate::error::{Error, Result};
use crate::manifest::{now_rfc3339, sha256_hex, IterationRecord, RunManifest};
use crate::masking::{EmbeddingStore, Masker};
use crate::selection::{
    build_score_matrix, build_training_pairs, generate_negatives, heuristic_select,
    scores_to_bytes, select_positives, ClassScores, MaskLogEntry, PseudoLabelSet,
};

pub const LOCK_FILE: &str = ".lock";
pub const SCORES_FILE: &str = "scores.bin";
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MASKS_FILE: &str = "masks.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Exclusive handle on a run directory, released on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let holder = format!("pid={} since={}", std::process::id(), now_rfc3339());
                f.write_all(holder.as_bytes()).map_err(|e| Error::io(&lock, e))?;
                Ok(RunDir { path, lock })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&lock).unwrap_or_else(|_| "unknown".into());
                Err(Error::Locked {
                    path,
                    holder: holder.trim().to_string(),
                })
            }
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn iteration_dir(&self, iteration: u32) -> PathBuf {
        self.path.join(format!("iter_{iteration}"))
    }

    /// Where backends should keep content-addressed checkpoints for this run.
    pub fn checkpoint_root(path: &Path) -> PathBuf {
        path.join("checkpoints")
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Seed for iteration `iteration` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, iteration: u32) -> u64 {
    let mut bytes = [0u8; 12];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..].copy_from_slice(&iteration.to_le_bytes());
    let digest = sha2::Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

use sha2::Digest as _;

/// Digest of a corpus' ids and texts, in order.
pub fn corpus_digest(corpus: &Corpus) -> String {
    let mut h = sha2::Sha256::new();
    for e in corpus.examples() {
        h.update(e.id.as_bytes());
        h.update([0]);
        h.update(e.text.as_bytes());
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct IterationArtifact {
    pub iteration: u32,
    pub dir: PathBuf,
    pub score_digest: String,
    pub pseudo_labels: PseudoLabelSet,
    pub pseudo_labels_path: PathBuf,
    pub pairs_path: PathBuf,
    pub input_model: ModelHandle,
    pub output_model: ModelHandle,
    pub duration: Duration,
    pub record: IterationRecord,
}

#[derive(Serialize)]
struct PseudoLabelLine<'a> {
    example_id: &'a str,
    class: &'a str,
    delta: f64,
    rank: usize,
    strategy: ContrastStrategy,
    iteration: u32,
}

#[derive(Serialize)]
struct PairLine<'a> {
    example_id: &'a str,
    premise: &'a str,
    hypothesis: &'a str,
    label: NliLabel,
    strategy: ContrastStrategy,
    iteration: u32,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&buf))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Everything an iteration persists before fine-tuning.
struct Prepared {
    score_digest: String,
    pseudo_label_digest: String,
    pairs_digest: String,
    pairs: Vec<NliTrainingPair>,
    masks: Vec<MaskLogEntry>,
}

#[allow(clippy::too_many_arguments)]
fn persist_selection<S: ClassScores>(
    dir: &Path,
    scores_bytes: &[u8],
    scores: &S,
    positives: &PseudoLabelSet,
    corpus: &Corpus,
    template: &HypothesisTemplate,
    strategy: ContrastStrategy,
    seed: u64,
    masker: Option<&Masker<'_>>,
    iteration: u32,
) -> Result<Prepared> {
    let score_digest = write_bytes(&dir.join(SCORES_FILE), scores_bytes)?;
    let pseudo_label_digest = write_jsonl(
        &dir.join(PSEUDO_LABELS_FILE),
        positives.per_class.iter().enumerate().flat_map(|(c, list)| {
            list.iter().enumerate().map(move |(rank, s)| PseudoLabelLine {
                example_id: &s.example_id,
                class: &positives.classes[c],
                delta: s.delta,
                rank,
                strategy,
                iteration,
            })
        }),
    )?;
    if positives.is_empty() {
        return Err(Error::Degenerate(format!(
            "iteration {iteration} selected no positives"
        )));
    }
    let negatives = generate_negatives(positives, scores, strategy, seed)?;
    let (pairs, masks) = build_training_pairs(positives, &negatives, corpus, template, masker)?;
    let pairs_digest = write_jsonl(
        &dir.join(PAIRS_FILE),
        pairs.iter().map(|p| PairLine {
            example_id: &p.example_id,
            premise: &p.premise,
            hypothesis: &p.hypothesis,
            label: p.label,
            strategy,
            iteration,
        }),
    )?;
    if masker.is_some() {
        write_jsonl(&dir.join(MASKS_FILE), &masks)?;
    }
    Ok(Prepared {
        score_digest,
        pseudo_label_digest,
        pairs_digest,
        pairs,
        masks,
    })
}

/// Drives self-training for one backend inside one run directory.
pub struct SelfTrainer<'a> {
    backend: &'a dyn Backend,
    run_dir: &'a RunDir,
    embeddings: Option<&'a EmbeddingStore>,
}

impl<'a> SelfTrainer<'a> {
    pub fn new(backend: &'a dyn Backend, run_dir: &'a RunDir) -> Self {
        SelfTrainer {
            backend,
            run_dir,
            embeddings: None,
        }
    }

    /// Embeddings used for token masking.
    pub fn with_embeddings(mut self, store: &'a EmbeddingStore) -> Self {
        self.embeddings = Some(store);
        self
    }

    fn masker(&self, enabled: bool) -> Result<Option<Masker<'a>>> {
        if !enabled {
            return Ok(None);
        }
        let store = self.embeddings.ok_or_else(|| {
            Error::Config("token masking is enabled but no embeddings were provided".into())
        })?;
        Ok(Some(Masker::new(store, self.backend.unk_token())))
    }

    /// One round: score the pool with `model`, select, build pairs and
    /// fine-tune. Artifacts are written before fine-tuning begins.
    pub fn run_iteration(
        &self,
        model: &ModelHandle,
        corpus: &Corpus,
        classes: &ClassSet,
        template: &HypothesisTemplate,
        config: &SelfTrainConfig,
        iteration: u32,
    ) -> Result<IterationArtifact> {
        if corpus.role() != CorpusRole::Unlabeled {
            return Err(Error::Validation(
                "self-training requires an unlabeled corpus".into(),
            ));
        }
        config.validate()?;
        let started = Instant::now();
        let masker = self.masker(config.masking_enabled)?;
        let seed = derive_seed(config.seed, iteration);
        let n = config.resolve_n(corpus.len());
        let dir = self.run_dir.iteration_dir(iteration);
        fresh_dir(&dir)?;

        let matrix = build_score_matrix(self.backend, model, corpus, classes, template)?;
        let mut positives = select_positives(&matrix, n)?;
        positives.iteration = iteration;
        positives.strategy = Some(config.contrast_strategy);
        for class in positives.empty_classes() {
            log::warn!("iteration {iteration}: class `{class}` has no confident examples");
        }
        let prepared = persist_selection(
            &dir,
            &scores_to_bytes(&matrix),
            &matrix,
            &positives,
            corpus,
            template,
            config.contrast_strategy,
            seed,
            masker.as_ref(),
            iteration,
        )?;

        let output = self
            .backend
            .fine_tune(model, &prepared.pairs, &config.fine_tune, seed)?;
        let checkpoint = dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
        let handle_path = checkpoint.join("handle.json");
        std::fs::write(&handle_path, serde_json::to_vec_pretty(&output)?)
            .map_err(|e| Error::io(&handle_path, e))?;

        let duration = started.elapsed();
        let record = iteration_record(iteration, seed, n, model, &output, &prepared, &positives, duration);
        Ok(IterationArtifact {
            iteration,
            pseudo_labels_path: dir.join(PSEUDO_LABELS_FILE),
            pairs_path: dir.join(PAIRS_FILE),
            dir,
            score_digest: prepared.score_digest,
            pseudo_labels: positives,
            input_model: model.clone(),
            output_model: output,
            duration,
            record,
        })
    }

    fn fresh_manifest(
        &self,
        model: &ModelHandle,
        corpus: &Corpus,
        classes: &ClassSet,
        template: &HypothesisTemplate,
        config: &SelfTrainConfig,
    ) -> Result<RunManifest> {
        let corpus_digest = corpus_digest(corpus);
        let config_digest = sha256_hex(&serde_json::to_vec(&json!({
            "config": config,
            "dataset_id": corpus.dataset_id(),
            "template": template,
            "classes": classes.names(),
            "corpus_digest": corpus_digest,
            "base_model": model,
        }))?);
        let now = now_rfc3339();
        Ok(RunManifest {
            config: config.clone(),
            config_digest,
            dataset_id: corpus.dataset_id().to_string(),
            template: template.clone(),
            classes: classes.names().to_vec(),
            corpus_size: corpus.len(),
            corpus_digest,
            base_model: model.clone(),
            iterations: Vec::new(),
            created_at: now.clone(),
            updated_at: now,
            extra: Default::default(),
            base_metrics: Default::default(),
        })
    }

    /// Run `config.iterations` rounds starting from `model`, or continue a
    /// previous run in this directory when `resume` is set.
    pub fn run_self_training(
        &self,
        model: &ModelHandle,
        corpus: &Corpus,
        classes: &ClassSet,
        template: &HypothesisTemplate,
        config: &SelfTrainConfig,
        resume: bool,
    ) -> Result<(ModelHandle, RunManifest)> {
        self.run_with_hook(model, corpus, classes, template, config, resume, |_, _| Ok(()))
    }

    /// Like [`run_self_training`](Self::run_self_training), calling `after`
    /// with each completed iteration and the manifest before it is saved.
    #[allow(clippy::too_many_arguments)]
    pub fn run_with_hook(
        &self,
        model: &ModelHandle,
        corpus: &Corpus,
        classes: &ClassSet,
        template: &HypothesisTemplate,
        config: &SelfTrainConfig,
        resume: bool,
        mut after: impl FnMut(&IterationArtifact, &mut RunManifest) -> Result<()>,
    ) -> Result<(ModelHandle, RunManifest)> {
        config.validate()?;
        let fresh = self.fresh_manifest(model, corpus, classes, template, config)?;
        let dir = self.run_dir.path();
        let mut manifest = if RunManifest::exists(dir) {
            let existing = RunManifest::load(dir)?;
            if !resume {
                return Err(Error::ResumeMismatch(format!(
                    "{} already holds a run; pass resume to continue it",
                    dir.display()
                )));
            }
            if existing.config_digest != fresh.config_digest {
                return Err(Error::ResumeMismatch(format!(
                    "config digest {} does not match the recorded {}",
                    fresh.config_digest, existing.config_digest
                )));
            }
            existing
        } else {
            fresh
        };
        manifest.save(dir)?;

        let mut current = manifest.latest_model().clone();
        let start = manifest.iterations.len() as u32 + 1;
        for iteration in start..=config.iterations {
            log::info!("iteration {iteration}/{}: model {current}", config.iterations);
            let artifact = self.run_iteration(&current, corpus, classes, template, config, iteration)?;
            manifest.iterations.push(artifact.record.clone());
            after(&artifact, &mut manifest)?;
            manifest.updated_at = now_rfc3339();
            manifest.save(dir)?;
            current = artifact.output_model;
        }
        Ok((current, manifest))
    }

    /// Single round of the embedding-similarity baseline: examples are chosen
    /// by closest-token similarity instead of model predictions, then masked,
    /// paired and fine-tuned exactly as in self-training.
    pub fn run_heuristic_baseline(
        &self,
        model: &ModelHandle,
        corpus: &Corpus,
        classes: &ClassSet,
        template: &HypothesisTemplate,
        config: &SelfTrainConfig,
    ) -> Result<IterationArtifact> {
        config.validate()?;
        let store = self.embeddings.ok_or_else(|| {
            Error::Config("the heuristic baseline needs word embeddings".into())
        })?;
        let started = Instant::now();
        let iteration = 1;
        let masker = self.masker(config.masking_enabled)?;
        let seed = derive_seed(config.seed, iteration);
        let n = config.resolve_n(corpus.len());
        let dir = self.run_dir.iteration_dir(iteration);
        fresh_dir(&dir)?;

        let (mut positives, scores) = heuristic_select(corpus, classes, store, n)?;
        if !scores.excluded.is_empty() {
            log::warn!(
                "{} examples had no embeddable token and were skipped",
                scores.excluded.len()
            );
        }
        positives.iteration = iteration;
        positives.strategy = Some(config.contrast_strategy);
        let prepared = persist_selection(
            &dir,
            &scores_to_bytes(&scores),
            &scores,
            &positives,
            corpus,
            template,
            config.contrast_strategy,
            seed,
            masker.as_ref(),
            iteration,
        )?;
        let output = self
            .backend
            .fine_tune(model, &prepared.pairs, &config.fine_tune, seed)?;
        let duration = started.elapsed();
        let record = iteration_record(iteration, seed, n, model, &output, &prepared, &positives, duration);
        Ok(IterationArtifact {
            iteration,
            pseudo_labels_path: dir.join(PSEUDO_LABELS_FILE),
            pairs_path: dir.join(PAIRS_FILE),
            dir,
            score_digest: prepared.score_digest,
            pseudo_labels: positives,
            input_model: model.clone(),
            output_model: output,
            duration,
            record,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn iteration_record(
    iteration: u32,
    seed: u64,
    n: usize,
    input: &ModelHandle,
    output: &ModelHandle,
    prepared: &Prepared,
    positives: &PseudoLabelSet,
    duration: Duration,
) -> IterationRecord {
    let entail = prepared
        .pairs
        .iter()
        .filter(|p| p.label == NliLabel::Entail)
        .count();
    let masked = prepared.masks.iter().filter(|m| m.masked_token.is_some()).count();
    IterationRecord {
        iteration,
        seed,
        n,
        input_model: input.clone(),
        output_model: output.clone(),
        score_digest: prepared.score_digest.clone(),
        pseudo_label_digest: prepared.pseudo_label_digest.clone(),
        pairs_digest: prepared.pairs_digest.clone(),
        positives: positives.len(),
        entail_pairs: entail,
        contradict_pairs: prepared.pairs.len() - entail,
        empty_classes: positives.empty_classes().into_iter().map(String::from).collect(),
        masked_premises: masked,
        unmasked_premises: prepared.masks.len() - masked,
        duration_ms: duration.as_millis() as u64,
        completed_at: now_rfc3339(),
        metrics: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_iteration() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunDir::open(dir.path()).unwrap();
        match RunDir::open(dir.path()) {
            Err(Error::Locked { holder, .. }) => assert!(holder.contains("pid=")),
            other => panic!("unexpected {other:?}"),
        }
        drop(first);
        assert!(RunDir::open(dir.path()).is_ok());
    }
}
