use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_score_request, Backend, BackendKind, ModelHandle, NliTrainingPair};
use crate::config::{FineTuneSpec, HypothesisTemplate, Optimizer};
use crate::error::{Error, Result};
use crate::masking::{class_name_vector, cosine, EmbeddingStore};
use crate::rank::sigmoid;

const STATE_FILE: &str = "state.json";
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trainable parameters of the mock scorer.
///
/// `confidence = sigmoid(bias[c] + scale * cos(mean premise vector, class vector))`.
/// Only the per-class biases are trained; `scale` is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockState {
    pub scale: f64,
    #[serde(default)]
    pub biases: BTreeMap<String, f64>,
}

impl MockState {
    pub fn new(scale: f64) -> Self {
        MockState {
            scale,
            biases: BTreeMap::new(),
        }
    }

    pub fn with_bias(mut self, class: impl Into<String>, bias: f64) -> Self {
        self.biases.insert(class.into(), bias);
        self
    }

    pub fn bias(&self, class: &str) -> f64 {
        self.biases.get(class).copied().unwrap_or(0.0)
    }
}

/// Deterministic, CPU-only stand-in for an NLI model, backed by static word
/// embeddings. States are stored content-addressed under a checkpoint root.
pub struct MockBackend {
    store: Arc<EmbeddingStore>,
    template: HypothesisTemplate,
    checkpoint_root: PathBuf,
    unk_token: String,
    states: Mutex<HashMap<String, Arc<MockState>>>,
    class_vectors: Mutex<HashMap<String, Option<Arc<Vec<f64>>>>>,
}

impl MockBackend {
    pub fn new(
        store: Arc<EmbeddingStore>,
        template: HypothesisTemplate,
        checkpoint_root: impl Into<PathBuf>,
    ) -> Self {
        MockBackend {
            store,
            template,
            checkpoint_root: checkpoint_root.into(),
            unk_token: "<unk>".to_string(),
            states: Mutex::default(),
            class_vectors: Mutex::default(),
        }
    }

    pub fn checkpoint_root(&self) -> &Path {
        &self.checkpoint_root
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    /// Persist an initial state and return its root handle.
    pub fn init(&self, state: MockState) -> Result<ModelHandle> {
        let state_ref = self.persist(None, &state)?;
        Ok(ModelHandle::root(BackendKind::Mock, state_ref))
    }

    pub fn state(&self, model: &ModelHandle) -> Result<Arc<MockState>> {
        if model.backend_kind != BackendKind::Mock {
            return Err(Error::Validation(format!(
                "handle {model} does not belong to the mock backend"
            )));
        }
        if let Some(s) = self.states.lock().expect("state cache").get(&model.state_ref) {
            return Ok(Arc::clone(s));
        }
        let path = self.checkpoint_dir(&model.state_ref).join(STATE_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Storage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let state: Arc<MockState> = Arc::new(serde_json::from_str(&text)?);
        self.states
            .lock()
            .expect("state cache")
            .insert(model.state_ref.clone(), Arc::clone(&state));
        Ok(state)
    }

    pub fn checkpoint_dir(&self, state_ref: &str) -> PathBuf {
        self.checkpoint_root.join(state_ref)
    }

    fn persist(&self, parent: Option<&str>, state: &MockState) -> Result<String> {
        let body = serde_json::to_vec_pretty(state)?;
        let mut hasher = Sha256::new();
        hasher.update(parent.unwrap_or("").as_bytes());
        hasher.update([0u8]);
        hasher.update(&body);
        let state_ref = hex::encode(&hasher.finalize()[..12]);

        let dir = self.checkpoint_dir(&state_ref);
        let storage = |e: std::io::Error| {
            Error::Storage(format!("cannot write checkpoint {}: {e}", dir.display()))
        };
        std::fs::create_dir_all(&dir).map_err(storage)?;
        std::fs::write(dir.join(STATE_FILE), &body).map_err(storage)?;
        self.states
            .lock()
            .expect("state cache")
            .insert(state_ref.clone(), Arc::new(state.clone()));
        Ok(state_ref)
    }

    fn class_vector(&self, class: &str) -> Option<Arc<Vec<f64>>> {
        let mut cache = self.class_vectors.lock().expect("class vector cache");
        cache
            .entry(class.to_string())
            .or_insert_with(|| class_name_vector(class, &self.store).ok().map(Arc::new))
            .clone()
    }

    fn class_of<'h>(&self, hypothesis: &'h str) -> Result<&'h str> {
        self.template.extract(hypothesis).ok_or_else(|| {
            Error::Validation(format!(
                "hypothesis {hypothesis:?} does not match template {:?}",
                self.template.pattern()
            ))
        })
    }

    /// Cosine between the premise's mean content vector and the class vector;
    /// 0 when either side has no in-vocabulary token.
    fn similarity(&self, premise_vec: Option<&[f64]>, class: &str) -> f64 {
        match (premise_vec, self.class_vector(class)) {
            (Some(p), Some(c)) => cosine(p, &c),
            _ => 0.0,
        }
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn unk_token(&self) -> &str {
        &self.unk_token
    }

    fn score_entailment(
        &self,
        model: &ModelHandle,
        premise: &str,
        hypotheses: &[String],
    ) -> Result<Vec<f64>> {
        check_score_request(premise, hypotheses)?;
        let state = self.state(model)?;
        let premise_vec = self.store.mean_vector(premise);
        hypotheses
            .iter()
            .map(|h| {
                let class = self.class_of(h)?;
                let sim = self.similarity(premise_vec.as_deref(), class);
                Ok(sigmoid(state.bias(class) + state.scale * sim))
            })
            .collect()
    }

    fn fine_tune(
        &self,
        model: &ModelHandle,
        pairs: &[NliTrainingPair],
        spec: &FineTuneSpec,
        seed: u64,
    ) -> Result<ModelHandle> {
        if pairs.is_empty() {
            return Err(Error::Validation("cannot fine-tune on zero pairs".into()));
        }
        spec.validate()?;
        let parent = self.state(model)?;

        // (class, similarity, target) per pair; similarities do not depend on
        // the trainable biases, so compute them once.
        let mut premise_cache: HashMap<&str, Option<Vec<f64>>> = HashMap::new();
        let examples = pairs
            .iter()
            .map(|p| {
                let class = self.class_of(&p.hypothesis)?;
                let pv = premise_cache
                    .entry(p.premise.as_str())
                    .or_insert_with(|| self.store.mean_vector(&p.premise));
                Ok((class, self.similarity(pv.as_deref(), class), p.label.target()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut state = (*parent).clone();
        let mut moments: BTreeMap<&str, (f64, f64, i32)> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..spec.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(spec.batch_size as usize) {
                let mut grads: BTreeMap<&str, f64> = BTreeMap::new();
                for &i in batch {
                    let (class, sim, target) = examples[i];
                    let p = sigmoid(state.bias(class) + state.scale * sim);
                    // d(binary cross entropy)/d(bias) = p - target
                    *grads.entry(class).or_insert(0.0) += p - target;
                }
                let lr = spec.learning_rate;
                for (class, g) in grads {
                    let g = g / batch.len() as f64;
                    let bias = state.biases.entry(class.to_string()).or_insert(0.0);
                    match spec.optimizer {
                        Optimizer::Sgd => *bias -= lr * g,
                        Optimizer::AdamW => {
                            let (m, v, t) = moments.entry(class).or_insert((0.0, 0.0, 0));
                            *t += 1;
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                            let m_hat = *m / (1.0 - ADAM_BETA1.powi(*t));
                            let v_hat = *v / (1.0 - ADAM_BETA2.powi(*t));
                            *bias -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }

        let state_ref = self.persist(Some(&model.state_ref), &state)?;
        Ok(model.child(state_ref))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::NliLabel;

    fn store() -> Arc<EmbeddingStore> {
        Arc::new(
            EmbeddingStore::from_vectors([
                ("alpha", vec![1.0, 0.0, 0.0]),
                ("beta", vec![0.0, 1.0, 0.0]),
                ("gamma", vec![0.0, 0.0, 1.0]),
                ("apple", vec![0.9, 0.1, 0.0]),
                ("banana", vec![0.1, 0.9, 0.1]),
                ("cherry", vec![0.0, 0.2, 0.9]),
            ])
            .unwrap(),
        )
    }

    fn backend(dir: &Path) -> MockBackend {
        MockBackend::new(store(), HypothesisTemplate::default(), dir)
    }

    fn hyps(classes: &[&str]) -> Vec<String> {
        let t = HypothesisTemplate::default();
        classes.iter().map(|c| t.render(c).unwrap()).collect()
    }

    #[test]
    fn shared_tokens_win() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        let m = b.init(MockState::new(4.0)).unwrap();
        let s = b
            .score_entailment(&m, "banana", &hyps(&["alpha", "beta", "gamma"]))
            .unwrap();
        assert!(s[1] > s[0] && s[1] > s[2], "{s:?}");
        assert!(s.iter().all(|c| (0.0..=1.0).contains(c)));
        let again = b
            .score_entailment(&m, "banana", &hyps(&["alpha", "beta", "gamma"]))
            .unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_foreign_hypothesis() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        let m = b.init(MockState::new(1.0)).unwrap();
        let err = b.score_entailment(&m, "apple", &["Unrelated sentence".to_string()]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn fine_tune_creates_child_and_keeps_parent() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        let m = b.init(MockState::new(2.0)).unwrap();
        let before = b.score_entailment(&m, "apple", &hyps(&["alpha"])).unwrap()[0];
        let pairs: Vec<_> = (0..50)
            .map(|i| NliTrainingPair {
                example_id: i.to_string(),
                premise: "apple".into(),
                hypothesis: hyps(&["alpha"])[0].clone(),
                label: NliLabel::Entail,
            })
            .collect();
        let spec = FineTuneSpec {
            learning_rate: 0.1,
            ..FineTuneSpec::default()
        };
        let m1 = b.fine_tune(&m, &pairs, &spec, 7).unwrap();
        assert_ne!(m1, m);
        assert_eq!(m1.lineage, std::slice::from_ref(&m.state_ref));
        let after = b.score_entailment(&m1, "apple", &hyps(&["alpha"])).unwrap()[0];
        assert!(after > before);
        // Parent unchanged.
        assert_eq!(b.score_entailment(&m, "apple", &hyps(&["alpha"])).unwrap()[0], before);

        // A fresh backend reads the checkpoint from disk.
        let b2 = backend(dir.path());
        assert_eq!(b2.state(&m1).unwrap().bias("alpha"), b.state(&m1).unwrap().bias("alpha"));
    }

    #[test]
    fn fine_tune_rejects_empty_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let b = backend(dir.path());
        let m = b.init(MockState::new(1.0)).unwrap();
        assert!(matches!(
            b.fine_tune(&m, &[], &FineTuneSpec::default(), 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unwritable_checkpoint_root_is_storage_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let b = backend(&blocker);
        assert!(matches!(b.init(MockState::new(1.0)), Err(Error::Storage(_))));
    }
}
