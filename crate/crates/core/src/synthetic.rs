//! Synthetic classification worlds for the mock backend.
//!
//! Each class owns a random direction in embedding space. Topic words lie
//! near their class direction, filler words are isotropic noise, and every
//! example mixes a few topic words of its gold class with filler and the
//! occasional word from another class. Initial mock biases are skewed so the
//! zero-shot model starts out miscalibrated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::MockState;
use crate::config::ClassSet;
use crate::datasets::{Corpus, CorpusRole, Example, LabeledExample};
use crate::error::{Error, Result};
use crate::masking::EmbeddingStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub classes: Vec<String>,
    pub dim: usize,
    pub topic_words_per_class: usize,
    pub filler_words: usize,
    /// Standard deviation of topic-word noise around the class direction.
    pub topic_noise: f64,
    pub tokens_per_example: usize,
    pub min_topic_tokens: usize,
    pub max_topic_tokens: usize,
    /// Probability that an example also contains one topic word of another class.
    pub confuser_rate: f64,
    pub unlabeled: usize,
    pub test: usize,
    pub scale: f64,
    /// Initial mock bias per class, aligned with `classes`.
    pub initial_biases: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dataset_id: "synthetic".into(),
            classes: ["sports", "business", "science", "politics"]
                .map(String::from)
                .to_vec(),
            dim: 16,
            topic_words_per_class: 30,
            filler_words: 120,
            topic_noise: 0.35,
            tokens_per_example: 10,
            min_topic_tokens: 2,
            max_topic_tokens: 3,
            confuser_rate: 0.5,
            unlabeled: 500,
            test: 200,
            scale: 4.0,
            initial_biases: vec![1.3, 0.45, -0.45, -1.3],
        }
    }
}

pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub store: EmbeddingStore,
    pub classes: ClassSet,
    pub unlabeled: Corpus,
    pub test: Corpus,
    pub initial_state: MockState,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl SyntheticWorld {
    pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.initial_biases.len() != spec.classes.len() {
            return Err(Error::Config(format!(
                "{} initial biases for {} classes",
                spec.initial_biases.len(),
                spec.classes.len()
            )));
        }
        if spec.min_topic_tokens > spec.max_topic_tokens
            || spec.max_topic_tokens + 1 > spec.tokens_per_example
            || spec.min_topic_tokens == 0
        {
            return Err(Error::Config("inconsistent topic token counts".into()));
        }
        let classes = ClassSet::new(&spec.dataset_id, &spec.classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let directions: Vec<Vec<f64>> = (0..classes.len())
            .map(|_| unit(gaussian(&mut rng, spec.dim, 1.0)))
            .collect();
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        let mut topic_words: Vec<Vec<String>> = Vec::new();
        for (c, name) in classes.names().iter().enumerate() {
            entries.push((name.clone(), directions[c].clone()));
            let mut words = Vec::new();
            for i in 0..spec.topic_words_per_class {
                let noise = gaussian(&mut rng, spec.dim, spec.topic_noise);
                let v = directions[c].iter().zip(&noise).map(|(d, n)| d + n).collect();
                let word = format!("{}{i}", name.replace(' ', ""));
                entries.push((word.clone(), v));
                words.push(word);
            }
            topic_words.push(words);
        }
        let fillers: Vec<String> = (0..spec.filler_words).map(|i| format!("filler{i}")).collect();
        for f in &fillers {
            entries.push((f.clone(), unit(gaussian(&mut rng, spec.dim, 1.0))));
        }
        let store = EmbeddingStore::from_vectors(entries)?;

        let mut make = |count: usize, prefix: &str| -> Vec<LabeledExample> {
            (0..count)
                .map(|i| {
                    let gold = rng.gen_range(0..classes.len());
                    let n_topic = rng.gen_range(spec.min_topic_tokens..=spec.max_topic_tokens);
                    let mut tokens: Vec<&str> = (0..n_topic)
                        .map(|_| topic_words[gold].choose(&mut rng).expect("topic words").as_str())
                        .collect();
                    if rng.gen_bool(spec.confuser_rate) {
                        let other = (gold + rng.gen_range(1..classes.len())) % classes.len();
                        tokens.push(topic_words[other].choose(&mut rng).expect("topic words"));
                    }
                    while tokens.len() < spec.tokens_per_example {
                        tokens.push(fillers.choose(&mut rng).expect("fillers"));
                    }
                    tokens.shuffle(&mut rng);
                    LabeledExample {
                        example: Example {
                            id: format!("{prefix}{i}"),
                            text: tokens.join(" "),
                        },
                        gold_class: classes.name(gold).to_string(),
                    }
                })
                .collect()
        };
        let unlabeled: Vec<Example> = make(spec.unlabeled, "u").into_iter().map(|l| l.example).collect();
        let test = make(spec.test, "t");

        let initial_state = classes
            .names()
            .iter()
            .zip(&spec.initial_biases)
            .fold(MockState::new(spec.scale), |s, (c, b)| s.with_bias(c.clone(), *b));

        Ok(SyntheticWorld {
            unlabeled: Corpus::unlabeled(&spec.dataset_id, unlabeled)?,
            test: Corpus::labeled(&spec.dataset_id, CorpusRole::Test, test)?,
            spec: spec.clone(),
            store,
            classes,
            initial_state,
        })
    }

    /// Write `embeddings.txt`, `unlabeled.jsonl`, `test.jsonl`,
    /// `registry.json` and `mock_state.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.write_text(&dir.join("embeddings.txt"))?;
        write_corpus(&dir.join("unlabeled.jsonl"), &self.unlabeled)?;
        write_corpus(&dir.join("test.jsonl"), &self.test)?;
        let registry = serde_json::json!({ self.classes.dataset_id(): self.classes.names() });
        let path = dir.join("registry.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&registry)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("mock_state.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.initial_state)?)
            .map_err(|e| Error::io(&path, e))
    }
}

/// Write a corpus as JSONL with `id`, `text` and (when labeled) `label`.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = Vec::new();
    let gold = corpus.gold_labels();
    for (i, e) in corpus.examples().iter().enumerate() {
        let mut row = serde_json::json!({ "id": e.id, "text": e.text });
        if let Some(g) = gold {
            row["label"] = serde_json::Value::String(g[i].clone());
        }
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_corpus, Format};
    use crate::masking::load_embeddings;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            unlabeled: 40,
            test: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticWorld::generate(&small(), 3).unwrap();
        let b = SyntheticWorld::generate(&small(), 3).unwrap();
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_eq!(a.test, b.test);
        let c = SyntheticWorld::generate(&small(), 4).unwrap();
        assert_ne!(a.unlabeled, c.unlabeled);
    }

    #[test]
    fn every_example_has_content_tokens() {
        let w = SyntheticWorld::generate(&small(), 0).unwrap();
        for e in w.unlabeled.examples() {
            assert!(w.store.mean_vector(&e.text).is_some());
        }
        assert_eq!(w.test.gold_labels().unwrap().len(), 20);
    }

    #[test]
    fn round_trips_through_files() {
        let w = SyntheticWorld::generate(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_to(dir.path()).unwrap();
        let store = load_embeddings(&dir.path().join("embeddings.txt")).unwrap();
        assert_eq!(store.len(), w.store.len());
        assert_eq!(store.get("sports3"), w.store.get("sports3"));
        let test = load_corpus(&dir.path().join("test.jsonl"), Format::Jsonl, CorpusRole::Test, "synthetic").unwrap();
        assert_eq!(test, w.test);
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = SyntheticSpec {
            initial_biases: vec![0.0],
            ..small()
        };
        assert!(SyntheticWorld::generate(&spec, 0).is_err());
    }
}
