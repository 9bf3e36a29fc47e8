//! Static word embeddings and class-similarity token masking.
//!
//! For each pseudo-labeled example the single token most similar to the
//! assigned class name is replaced with the backend's unknown token.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Whitespace-delimited token with surrounding punctuation stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    /// Token text as it appears in the source (case preserved).
    pub text: &'a str,
    /// Byte range of `text` within the source string.
    pub span: Range<usize>,
    /// The whole whitespace-delimited chunk the token came from.
    pub chunk: &'a str,
}

impl Token<'_> {
    /// Lowercased lookup key.
    pub fn key(&self) -> String {
        self.text.replace('\u{2019}', "'").to_lowercase()
    }
}

/// Split on whitespace and strip leading/trailing punctuation from each
/// chunk. Chunks that are punctuation only are dropped.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut offset = 0;
    for chunk in text.split_whitespace() {
        // split_whitespace yields sub-slices, so find the chunk from the running offset.
        let start = offset + text[offset..].find(chunk).expect("chunk comes from text");
        offset = start + chunk.len();
        let trimmed_front = chunk.trim_start_matches(|c: char| !c.is_alphanumeric());
        let lead = chunk.len() - trimmed_front.len();
        let core = trimmed_front.trim_end_matches(|c: char| !c.is_alphanumeric());
        if core.is_empty() {
            continue;
        }
        tokens.push(Token {
            text: core,
            span: start + lead..start + lead + core.len(),
            chunk,
        });
    }
    tokens
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Token vectors of a single dimension plus a stopword list.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    stopwords: HashSet<String>,
}

impl EmbeddingStore {
    /// Build a store from `(token, vector)` pairs. Duplicate tokens keep their
    /// first vector.
    pub fn from_vectors<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut store = EmbeddingStore {
            dim: 0,
            index: HashMap::new(),
            data: Vec::new(),
            stopwords: default_stopwords(),
        };
        for (i, (token, vector)) in entries.into_iter().enumerate() {
            if i == 0 {
                store.dim = vector.len();
            }
            if vector.len() != store.dim || vector.is_empty() {
                return Err(Error::Validation(format!(
                    "vector for `{}` has dimension {}, expected {}",
                    token.as_ref(),
                    vector.len(),
                    store.dim
                )));
            }
            store.insert(token.as_ref(), &vector);
        }
        Ok(store)
    }

    fn insert(&mut self, token: &str, vector: &[f64]) {
        let key = token.to_lowercase();
        if self.index.contains_key(&key) {
            return;
        }
        self.index.insert(key, self.data.len() / self.dim.max(1));
        self.data.extend_from_slice(vector);
    }

    /// Read a word2vec/GloVe text file: one token followed by `d` floats per
    /// line. An optional word2vec `count dim` header line is accepted.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = EmbeddingStore {
            dim: 0,
            index: HashMap::new(),
            data: Vec::new(),
            stopwords: default_stopwords(),
        };
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut vector = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else {
                continue;
            };
            vector.clear();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad float `{f}`")))?;
                vector.push(v);
            }
            if i == 0 && vector.len() == 1 && token.parse::<usize>().is_ok() {
                // word2vec header: "<count> <dim>"
                store.dim = vector[0] as usize;
                continue;
            }
            if store.dim == 0 {
                store.dim = vector.len();
            }
            if vector.is_empty() || vector.len() != store.dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {} values, found {}", store.dim, vector.len()),
                ));
            }
            store.insert(token, &vector);
        }
        if store.index.is_empty() {
            return Err(parse_err(0, "no vectors found".into()));
        }
        Ok(store)
    }

    /// Replace the stopword list with a newline-delimited file.
    pub fn load_stopwords(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.stopwords = parse_stopwords(&text);
        Ok(())
    }

    pub fn with_stopwords<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.stopwords = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Case-insensitive lookup.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        let row = match self.index.get(token) {
            Some(&row) => row,
            None => *self.index.get(&token.to_lowercase())?,
        };
        Some(&self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(&token.to_lowercase())
    }

    /// Tokens of `text` that carry meaning: in vocabulary and not stopwords.
    pub fn content_tokens<'a>(&'a self, text: &'a str) -> impl Iterator<Item = (Token<'a>, &'a [f64])> {
        tokenize(text).into_iter().filter_map(move |t| {
            let key = t.key();
            if self.stopwords.contains(&key) {
                return None;
            }
            let v = self.get(&key)?;
            Some((t, v))
        })
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> Vec<(&str, &[f64])> {
        let mut rows: Vec<(&str, usize)> = self.index.iter().map(|(k, i)| (k.as_str(), *i)).collect();
        rows.sort_unstable_by_key(|(_, i)| *i);
        rows.into_iter()
            .map(|(k, i)| (k, &self.data[i * self.dim..(i + 1) * self.dim]))
            .collect()
    }

    /// Write in GloVe text format, readable by [`load`](Self::load).
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (token, v) in self.entries() {
            out.push_str(token);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Mean vector of the content tokens of `text`, or `None` if there are none.
    pub fn mean_vector(&self, text: &str) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for (_, v) in self.content_tokens(text) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
        (count > 0).then(|| {
            sum.iter_mut().for_each(|s| *s /= count as f64);
            sum
        })
    }
}

fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path)
}

/// Vector for a (possibly multi-word) class name: the mean of its
/// in-vocabulary unigrams after stopword and punctuation removal. When every
/// unigram is a stopword, in-vocabulary stopwords are used instead.
pub fn class_name_vector(class_name: &str, store: &EmbeddingStore) -> Result<Vec<f64>> {
    if let Some(v) = store.mean_vector(class_name) {
        return Ok(v);
    }
    let fallback: Vec<&[f64]> = tokenize(class_name)
        .iter()
        .filter_map(|t| store.get(&t.key()))
        .collect();
    if fallback.is_empty() {
        return Err(Error::UnmaskableClass(class_name.to_string()));
    }
    let mut mean = vec![0.0; store.dim()];
    for v in &fallback {
        for (m, x) in mean.iter_mut().zip(*v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fallback.len() as f64);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedToken {
    pub token: String,
    /// Byte range in the original text that was replaced.
    pub span: Range<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    pub original_text: String,
    pub masked_text: String,
    /// `None` when no maskable token was found; `masked_text` is then unchanged.
    pub masked: Option<MaskedToken>,
}

impl MaskResult {
    pub fn unchanged(text: &str) -> Self {
        MaskResult {
            original_text: text.to_string(),
            masked_text: text.to_string(),
            masked: None,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.masked.is_some()
    }
}

/// Replace the single occurrence of the content token most similar to
/// `class_vector` with `unk_token`. Ties go to the earliest occurrence;
/// chunks already containing `unk_token` are never selected.
pub fn mask_most_similar(
    text: &str,
    class_vector: &[f64],
    store: &EmbeddingStore,
    unk_token: &str,
) -> MaskResult {
    let mut best: Option<(Token<'_>, f64)> = None;
    for (token, vector) in store.content_tokens(text) {
        if !unk_token.is_empty() && token.chunk.contains(unk_token) {
            continue;
        }
        let sim = cosine(vector, class_vector);
        if best.as_ref().is_none_or(|(_, b)| sim > *b) {
            best = Some((token, sim));
        }
    }
    let Some((token, similarity)) = best else {
        return MaskResult::unchanged(text);
    };
    let mut masked_text = String::with_capacity(text.len() + unk_token.len());
    masked_text.push_str(&text[..token.span.start]);
    masked_text.push_str(unk_token);
    masked_text.push_str(&text[token.span.end..]);
    MaskResult {
        original_text: text.to_string(),
        masked_text,
        masked: Some(MaskedToken {
            token: token.text.to_string(),
            span: token.span,
            similarity,
        }),
    }
}

/// Masking bound to one store and unknown token, with class vectors cached.
#[derive(Debug)]
pub struct Masker<'a> {
    store: &'a EmbeddingStore,
    unk_token: String,
    class_vectors: std::sync::Mutex<HashMap<String, Option<Vec<f64>>>>,
}

impl<'a> Masker<'a> {
    pub fn new(store: &'a EmbeddingStore, unk_token: impl Into<String>) -> Self {
        Masker {
            store,
            unk_token: unk_token.into(),
            class_vectors: Default::default(),
        }
    }

    pub fn unk_token(&self) -> &str {
        &self.unk_token
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    /// Mask `text` for `class_name`. Classes without an in-vocabulary unigram
    /// leave the text unchanged (logged once per class).
    pub fn mask(&self, text: &str, class_name: &str) -> MaskResult {
        let vector = {
            let mut cache = self.class_vectors.lock().expect("mask cache poisoned");
            cache
                .entry(class_name.to_string())
                .or_insert_with(|| match class_name_vector(class_name, self.store) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("masking disabled for class `{class_name}`: {e}");
                        None
                    }
                })
                .clone()
        };
        match vector {
            Some(v) => mask_most_similar(text, &v, self.store, &self.unk_token),
            None => MaskResult::unchanged(text),
        }
    }
}
