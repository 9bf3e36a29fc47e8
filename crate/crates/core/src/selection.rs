//! Pseudo-label selection: score matrices, best-versus-second-best positives,
//! contrast negatives, NLI pair construction and the embedding heuristic.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{classify, Backend, ModelHandle, NliLabel, NliTrainingPair};
use crate::config::{ClassSet, ContrastStrategy, HypothesisTemplate};
use crate::datasets::{Corpus, CorpusRole};
use crate::error::{Error, Result};
use crate::masking::{class_name_vector, cosine, EmbeddingStore, MaskResult, Masker};
use crate::rank;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Row-major per-example class scores.
pub trait ClassScores {
    fn classes(&self) -> &ClassSet;
    fn example_ids(&self) -> &[String];
    fn row(&self, i: usize) -> &[f64];

    fn n_rows(&self) -> usize {
        self.example_ids().len()
    }
}

/// Normalized |U| x |C| entailment distribution; each row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    example_ids: Vec<String>,
    classes: ClassSet,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(example_ids: Vec<String>, classes: ClassSet, scores: Vec<f64>) -> Result<Self> {
        let k = classes.len();
        if scores.len() != example_ids.len() * k {
            return Err(Error::Validation(format!(
                "score matrix has {} values for {} rows x {k} classes",
                scores.len(),
                example_ids.len()
            )));
        }
        for (i, row) in scores.chunks(k).enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "row `{}` has a score outside [0, 1]",
                    example_ids[i]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "row `{}` sums to {sum}, expected 1",
                    example_ids[i]
                )));
            }
        }
        Ok(ScoreMatrix {
            example_ids,
            classes,
            scores,
        })
    }

    pub fn from_rows(example_ids: Vec<String>, classes: ClassSet, rows: &[Vec<f64>]) -> Result<Self> {
        let scores = rows.iter().flatten().copied().collect();
        Self::new(example_ids, classes, scores)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn predictions(&self) -> Vec<PredictionRecord> {
        (0..self.n_rows()).map(|i| prediction(self, i)).collect()
    }
}

impl ClassScores for ScoreMatrix {
    fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    fn row(&self, i: usize) -> &[f64] {
        let k = self.classes.len();
        &self.scores[i * k..(i + 1) * k]
    }
}

/// Little-endian binary dump: magic `SCMX`, u32 rows, u32 cols, then the
/// f64 values row by row.
pub fn scores_to_bytes<S: ClassScores>(scores: &S) -> Vec<u8> {
    let (rows, cols) = (scores.n_rows(), scores.classes().len());
    let mut out = Vec::with_capacity(12 + rows * cols * 8);
    out.extend_from_slice(b"SCMX");
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for i in 0..rows {
        for v in scores.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub top_class: String,
    pub second_class: String,
    pub delta: f64,
}

fn prediction<S: ClassScores>(scores: &S, i: usize) -> PredictionRecord {
    let row = scores.row(i);
    let (top, second) = rank::top_two(row);
    PredictionRecord {
        example_id: scores.example_ids()[i].clone(),
        top_class: scores.classes().name(top).to_string(),
        second_class: scores.classes().name(second).to_string(),
        delta: row[top] - row[second],
    }
}

/// Classify every unlabeled example. Rows follow corpus order.
pub fn build_score_matrix(
    backend: &dyn Backend,
    model: &ModelHandle,
    corpus: &Corpus,
    classes: &ClassSet,
    template: &HypothesisTemplate,
) -> Result<ScoreMatrix> {
    if corpus.role() != CorpusRole::Unlabeled {
        return Err(Error::Validation(format!(
            "score matrix requires an unlabeled corpus, got {:?}",
            corpus.role()
        )));
    }
    let rows = corpus
        .examples()
        .par_iter()
        .map(|e| {
            classify(backend, model, &e.text, classes, template)
                .map(|p| p.class_scores)
                .map_err(|source| Error::Scoring {
                    id: e.id.clone(),
                    source: Box::new(source),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = corpus.examples().iter().map(|e| e.id.clone()).collect();
    ScoreMatrix::from_rows(ids, classes.clone(), &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub example_id: String,
    /// Row index in the score matrix (and corpus).
    pub row: usize,
    pub delta: f64,
}

/// Positives per class, each list sorted by delta descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub classes: Vec<String>,
    pub per_class: Vec<Vec<Selected>>,
    pub n: usize,
    pub iteration: u32,
    pub strategy: Option<ContrastStrategy>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Classes that received no positives.
    pub fn empty_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .zip(&self.per_class)
            .filter(|(_, s)| s.is_empty())
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// `(class index, selection)` in class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Selected)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, list)| list.iter().map(move |s| (c, s)))
    }
}

/// For each class keep the `n` examples it wins with the largest
/// top-minus-second margin. Equal margins keep corpus order.
pub fn select_positives<S: ClassScores>(scores: &S, n: usize) -> Result<PseudoLabelSet> {
    if n < 1 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let k = scores.classes().len();
    let mut per_class: Vec<Vec<Selected>> = vec![Vec::new(); k];
    for i in 0..scores.n_rows() {
        let row = scores.row(i);
        let (top, second) = rank::top_two(row);
        per_class[top].push(Selected {
            example_id: scores.example_ids()[i].clone(),
            row: i,
            delta: row[top] - row[second],
        });
    }
    for list in &mut per_class {
        // Stable sort keeps corpus order among equal deltas.
        list.sort_by(|a, b| b.delta.total_cmp(&a.delta));
        list.truncate(n);
    }
    Ok(PseudoLabelSet {
        classes: scores.classes().names().to_vec(),
        per_class,
        n,
        iteration: 0,
        strategy: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePair {
    pub example_id: String,
    pub row: usize,
    pub positive_class: String,
    pub negative_class: String,
}

/// Contradict targets for every positive, in positive order.
pub fn generate_negatives<S: ClassScores>(
    positives: &PseudoLabelSet,
    scores: &S,
    strategy: ContrastStrategy,
    seed: u64,
) -> Result<Vec<NegativePair>> {
    let classes = scores.classes();
    let k = classes.len();
    if k < 2 {
        return Err(Error::Config(
            "contrast pairs need at least two classes".into(),
        ));
    }
    if positives.is_empty() {
        return Err(Error::Validation("no positives to contrast".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, sel) in positives.iter() {
        if sel.row >= scores.n_rows() || scores.example_ids()[sel.row] != sel.example_id {
            return Err(Error::Consistency(format!(
                "positive `{}` does not match score row {}",
                sel.example_id, sel.row
            )));
        }
        let row = scores.row(sel.row);
        let mut push = |neg: usize| {
            out.push(NegativePair {
                example_id: sel.example_id.clone(),
                row: sel.row,
                positive_class: classes.name(c).to_string(),
                negative_class: classes.name(neg).to_string(),
            })
        };
        match strategy {
            ContrastStrategy::Random => {
                let draw = rng.gen_range(0..k - 1);
                push(if draw >= c { draw + 1 } else { draw });
            }
            ContrastStrategy::Closest => {
                let order = rank::rank_descending(row);
                let neg = order.into_iter().find(|&j| j != c).expect("k >= 2");
                push(neg);
            }
            ContrastStrategy::Furthest => {
                let order = rank::rank_descending(row);
                let neg = order.into_iter().rev().find(|&j| j != c).expect("k >= 2");
                push(neg);
            }
            ContrastStrategy::All => (0..k).filter(|&j| j != c).for_each(&mut push),
        }
    }
    Ok(out)
}

/// Record of one masking decision, kept for the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLogEntry {
    pub example_id: String,
    pub class: String,
    pub masked_token: Option<String>,
    pub similarity: Option<f64>,
}

/// One entail pair per positive and one contradict pair per negative. With a
/// masker, each (example, positive class) premise is masked once and reused
/// for all its pairs.
pub fn build_training_pairs(
    positives: &PseudoLabelSet,
    negatives: &[NegativePair],
    corpus: &Corpus,
    template: &HypothesisTemplate,
    masker: Option<&Masker<'_>>,
) -> Result<(Vec<NliTrainingPair>, Vec<MaskLogEntry>)> {
    let texts: HashMap<&str, &str> = corpus
        .examples()
        .iter()
        .map(|e| (e.id.as_str(), e.text.as_str()))
        .collect();
    let mut by_positive: HashMap<(&str, &str), Vec<&NegativePair>> = HashMap::new();
    for neg in negatives {
        by_positive
            .entry((neg.example_id.as_str(), neg.positive_class.as_str()))
            .or_default()
            .push(neg);
    }

    let mut pairs = Vec::with_capacity(positives.len() + negatives.len());
    let mut log = Vec::new();
    let mut used = 0usize;
    for (c, sel) in positives.iter() {
        let class = positives.classes[c].as_str();
        let text = *texts.get(sel.example_id.as_str()).ok_or_else(|| {
            Error::Consistency(format!(
                "pseudo-label references unknown example `{}`",
                sel.example_id
            ))
        })?;
        let premise = match masker {
            Some(m) => {
                let MaskResult {
                    masked_text,
                    masked,
                    ..
                } = m.mask(text, class);
                log.push(MaskLogEntry {
                    example_id: sel.example_id.clone(),
                    class: class.to_string(),
                    masked_token: masked.as_ref().map(|t| t.token.clone()),
                    similarity: masked.as_ref().map(|t| t.similarity),
                });
                masked_text
            }
            None => text.to_string(),
        };
        pairs.push(NliTrainingPair {
            example_id: sel.example_id.clone(),
            premise: premise.clone(),
            hypothesis: template.render(class)?,
            label: NliLabel::Entail,
        });
        for neg in by_positive
            .get(&(sel.example_id.as_str(), class))
            .into_iter()
            .flatten()
        {
            used += 1;
            pairs.push(NliTrainingPair {
                example_id: sel.example_id.clone(),
                premise: premise.clone(),
                hypothesis: template.render(&neg.negative_class)?,
                label: NliLabel::Contradict,
            });
        }
    }
    if used != negatives.len() {
        return Err(Error::Consistency(format!(
            "{} negative pairs do not belong to any positive",
            negatives.len() - used
        )));
    }
    Ok((pairs, log))
}

/// Raw "closest token" similarities: for each example and class, the highest
/// cosine between any content token and the class vector.
#[derive(Debug, Clone)]
pub struct HeuristicScores {
    example_ids: Vec<String>,
    rows: Vec<usize>,
    classes: ClassSet,
    scores: Vec<f64>,
    /// Examples dropped because no token was embeddable.
    pub excluded: Vec<String>,
}

impl HeuristicScores {
    pub fn compute(corpus: &Corpus, classes: &ClassSet, store: &EmbeddingStore) -> Result<Self> {
        let class_vectors = classes
            .names()
            .iter()
            .map(|c| class_name_vector(c, store))
            .collect::<Result<Vec<_>>>()?;
        let mut out = HeuristicScores {
            example_ids: Vec::new(),
            rows: Vec::new(),
            classes: classes.clone(),
            scores: Vec::new(),
            excluded: Vec::new(),
        };
        for (i, e) in corpus.examples().iter().enumerate() {
            let tokens: Vec<&[f64]> = store.content_tokens(&e.text).map(|(_, v)| v).collect();
            if tokens.is_empty() {
                out.excluded.push(e.id.clone());
                continue;
            }
            for cv in &class_vectors {
                let best = tokens
                    .iter()
                    .map(|t| cosine(t, cv))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.scores.push(best);
            }
            out.example_ids.push(e.id.clone());
            out.rows.push(i);
        }
        Ok(out)
    }

    /// Corpus row of heuristic row `i`.
    pub fn corpus_row(&self, i: usize) -> usize {
        self.rows[i]
    }
}

impl ClassScores for HeuristicScores {
    fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    fn row(&self, i: usize) -> &[f64] {
        let k = self.classes.len();
        &self.scores[i * k..(i + 1) * k]
    }
}

/// Embedding-similarity baseline: selection identical to
/// [`select_positives`] but over [`HeuristicScores`].
pub fn heuristic_select(
    corpus: &Corpus,
    classes: &ClassSet,
    store: &EmbeddingStore,
    n: usize,
) -> Result<(PseudoLabelSet, HeuristicScores)> {
    let scores = HeuristicScores::compute(corpus, classes, store)?;
    let set = select_positives(&scores, n)?;
    Ok((set, scores))
}
