//! Corpus ingestion, unlabeled-pool sampling and the class-name registry.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{normalize_class_name, ClassSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example: Example,
    pub gold_class: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Unlabeled,
    Test,
    Validation,
}

impl CorpusRole {
    pub fn is_labeled(self) -> bool {
        !matches!(self, CorpusRole::Unlabeled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

/// An ordered collection of examples. Labeled roles carry one gold class
/// per example; unlabeled corpora never do.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dataset_id: String,
    role: CorpusRole,
    examples: Vec<Example>,
    gold: Option<Vec<String>>,
}

impl Corpus {
    pub fn unlabeled(dataset_id: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        check_examples(&examples)?;
        Ok(Corpus {
            dataset_id: dataset_id.into(),
            role: CorpusRole::Unlabeled,
            examples,
            gold: None,
        })
    }

    pub fn labeled(
        dataset_id: impl Into<String>,
        role: CorpusRole,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if !role.is_labeled() {
            return Err(Error::Validation(
                "labeled examples require a test or validation role".into(),
            ));
        }
        let (examples, gold): (Vec<_>, Vec<_>) = examples
            .into_iter()
            .map(|l| (l.example, normalize_class_name(&l.gold_class)))
            .unzip();
        check_examples(&examples)?;
        Ok(Corpus {
            dataset_id: dataset_id.into(),
            role,
            examples,
            gold: Some(gold),
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Gold classes aligned with [`examples`](Self::examples); `None` for unlabeled corpora.
    pub fn gold_labels(&self) -> Option<&[String]> {
        self.gold.as_deref()
    }

    pub fn labeled_examples(&self) -> Option<Vec<LabeledExample>> {
        let gold = self.gold.as_ref()?;
        Some(
            self.examples
                .iter()
                .zip(gold)
                .map(|(e, g)| LabeledExample {
                    example: e.clone(),
                    gold_class: g.clone(),
                })
                .collect(),
        )
    }

    /// Drop gold labels, yielding an unlabeled view of the same texts.
    pub fn into_unlabeled(self) -> Corpus {
        Corpus {
            role: CorpusRole::Unlabeled,
            gold: None,
            ..self
        }
    }
}

fn check_examples(examples: &[Example]) -> Result<()> {
    let mut seen = HashSet::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        if e.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "example #{} (`{}`) has empty text",
                i + 1,
                e.id
            )));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!("duplicate example id `{}`", e.id)));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct JsonRecord {
    text: Option<String>,
    label: Option<serde_json::Value>,
    id: Option<serde_json::Value>,
}

struct RawRecord {
    text: Option<String>,
    label: Option<String>,
    id: Option<String>,
}

/// Reduce a label value to a single class name. Lists keep their first
/// element (multi-label sources are treated as single-label).
fn label_from_json(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => label_from_str(s),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Array(items) => items.first().and_then(label_from_json),
        _ => None,
    }
}

fn label_from_str(s: &str) -> Option<String> {
    let first = s.split(',').next().unwrap_or("").trim();
    (!first.is_empty()).then(|| first.to_string())
}

fn id_from_json(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            record: i + 1,
            message: format!("invalid JSON: {e}"),
        })?;
        records.push(RawRecord {
            text: rec.text,
            label: rec.label.as_ref().and_then(label_from_json),
            id: rec.id.as_ref().and_then(id_from_json),
        });
    }
    Ok(records)
}

fn read_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Ingest {
                path: path.to_path_buf(),
                record: 0,
                message: format!("{other:?}"),
            },
        })?;
    let ingest = |record: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        record,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| ingest(0, e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (text_col, label_col, id_col) = (column("text"), column("label"), column("id"));
    if text_col.is_none() {
        return Err(ingest(0, "header has no `text` column".into()));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| ingest(i + 1, e.to_string()))?;
        let field = |col: Option<usize>| col.and_then(|c| row.get(c)).map(str::to_string);
        records.push(RawRecord {
            text: field(text_col),
            label: field(label_col).as_deref().and_then(label_from_str),
            id: field(id_col).filter(|s| !s.trim().is_empty()),
        });
    }
    Ok(records)
}

/// Load a corpus file. Ids default to the 0-based row ordinal; labels are
/// read only for labeled roles.
pub fn load_corpus(
    path: &Path,
    format: Format,
    role: CorpusRole,
    dataset_id: &str,
) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let records = match format {
        Format::Jsonl => read_jsonl(path)?,
        Format::Csv => read_csv(path)?,
    };
    if records.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            record: 0,
            message: "file contains no records".into(),
        });
    }

    let ingest = |record: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        record,
        message,
    };
    let mut seen = HashSet::with_capacity(records.len());
    let mut examples = Vec::with_capacity(records.len());
    let mut gold = Vec::new();
    for (ordinal, rec) in records.into_iter().enumerate() {
        let record = ordinal + 1;
        let text = match rec.text {
            Some(t) if !t.trim().is_empty() => t,
            Some(_) => return Err(ingest(record, "empty `text` field".into())),
            None => return Err(ingest(record, "missing `text` field".into())),
        };
        let id = rec.id.unwrap_or_else(|| ordinal.to_string());
        if !seen.insert(id.clone()) {
            return Err(ingest(record, format!("duplicate id `{id}`")));
        }
        if role.is_labeled() {
            match rec.label {
                Some(label) => gold.push(normalize_class_name(&label)),
                None => return Err(ingest(record, "missing `label` field".into())),
            }
        }
        examples.push(Example { id, text });
    }

    Ok(Corpus {
        dataset_id: dataset_id.to_string(),
        role,
        examples,
        gold: role.is_labeled().then_some(gold),
    })
}

/// Cap an unlabeled pool at `max_size` examples, drawn uniformly without
/// replacement. The subset keeps the input order.
pub fn sample_unlabeled(corpus: &Corpus, max_size: usize, seed: u64) -> Result<Corpus> {
    if max_size < 1 {
        return Err(Error::Config("max unlabeled size must be >= 1".into()));
    }
    if corpus.role != CorpusRole::Unlabeled {
        return Err(Error::Validation(format!(
            "can only sample unlabeled corpora, got {:?}",
            corpus.role
        )));
    }
    if corpus.len() <= max_size {
        return Ok(corpus.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corpus.len(), max_size).into_vec();
    picked.sort_unstable();
    Ok(Corpus {
        dataset_id: corpus.dataset_id.clone(),
        role: CorpusRole::Unlabeled,
        examples: picked.into_iter().map(|i| corpus.examples[i].clone()).collect(),
        gold: None,
    })
}

const BUILTIN_CLASSES: &[(&str, &[&str])] = &[
    (
        "20newsgroup",
        &[
            "atheism",
            "computer graphics",
            "hockey",
            "cryptography",
            "electronics",
            "medicine",
            "space",
            "christianity",
            "guns",
            "middle east",
            "politics",
            "religion",
            "microsoft windows",
            "pc hardware",
            "mac hardware",
            "windows x",
            "for sale",
            "cars",
            "motorcycles",
            "baseball",
        ],
    ),
    (
        "agnews",
        &["business", "world", "sports", "science and technology"],
    ),
    ("amazon", &["bad", "good"]),
    (
        "dbpedia",
        &[
            "album",
            "animal",
            "artist",
            "athlete",
            "building",
            "company",
            "educational institution",
            "film",
            "mean of transportation",
            "natural place",
            "office holder",
            "plant",
            "village",
            "written work",
        ],
    ),
    (
        "goemotions",
        &[
            "admiration",
            "amusement",
            "anger",
            "annoyance",
            "approval",
            "caring",
            "confusion",
            "curiosity",
            "desire",
            "disappointment",
            "disapproval",
            "disgust",
            "embarrassment",
            "excitement",
            "fear",
            "gratitude",
            "grief",
            "joy",
            "love",
            "nervousness",
            "neutral",
            "optimism",
            "pride",
            "realization",
            "relief",
            "remorse",
            "sadness",
            "surprise",
        ],
    ),
    ("imdb", &["bad", "good"]),
    (
        "isear",
        &[
            "anger", "disgust", "fear", "guilt", "joy", "sadness", "shame",
        ],
    ),
    (
        "yahoo",
        &[
            "business & finance",
            "computers & internet",
            "education & reference",
            "entertainment & music",
            "family & relationships",
            "health",
            "politics & government",
            "science & mathematics",
            "society & culture",
            "sports",
        ],
    ),
];

/// Dataset id to class names. Starts with the eight built-in benchmark
/// datasets; custom datasets can be added or overridden.
#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<String, ClassSet>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn builtin() -> Self {
        let entries = BUILTIN_CLASSES
            .iter()
            .map(|(id, names)| {
                let set = ClassSet::new(*id, names.iter().copied())
                    .expect("built-in class sets are valid");
                (id.to_string(), set)
            })
            .collect();
        Registry { entries }
    }

    pub fn register(&mut self, classes: ClassSet) {
        self.entries.insert(classes.dataset_id().to_string(), classes);
    }

    /// Merge a registry file: a JSON object mapping dataset id to an
    /// ordered list of class names.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("registry file {}: {e}", path.display())))?;
        for (id, names) in raw {
            self.register(ClassSet::new(id, names)?);
        }
        Ok(())
    }

    pub fn get(&self, dataset_id: &str) -> Result<&ClassSet> {
        self.entries
            .get(dataset_id)
            .ok_or_else(|| Error::UnknownDataset {
                id: dataset_id.to_string(),
                known: self.ids().map(str::to_string).collect(),
            })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Look up a built-in dataset's class names.
pub fn class_registry(dataset_id: &str) -> Result<ClassSet> {
    Registry::builtin().get(dataset_id).cloned()
}

/// Path-and-format pair used by configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<Format>,
}

impl CorpusSource {
    pub fn load(&self, role: CorpusRole, dataset_id: &str) -> Result<Corpus> {
        let format = match self.format.or_else(|| Format::from_path(&self.path)) {
            Some(f) => f,
            None => {
                return Err(Error::Config(format!(
                    "cannot infer format of {}; set `format` to csv or jsonl",
                    self.path.display()
                )))
            }
        };
        load_corpus(&self.path, format, role, dataset_id)
    }
}
