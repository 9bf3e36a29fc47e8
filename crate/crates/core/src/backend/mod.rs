//! Entailment scorers: the [`Backend`] trait, template-based classification,
//! and the two implementations (a trainable mock and a subprocess adapter
//! for transformer NLI models).

mod mock;
mod subprocess;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ClassSet, FineTuneSpec, HypothesisTemplate};
use crate::error::{Error, Result};
use crate::rank;

pub use mock::{MockBackend, MockState};
pub use subprocess::{SubprocessBackend, SubprocessConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    TransformerAdapter,
    Mock,
}

/// Reference to an immutable scorer state. Fine-tuning yields a child handle
/// whose lineage is the parent's lineage plus the parent itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelHandle {
    pub backend_kind: BackendKind,
    pub state_ref: String,
    pub lineage: Vec<String>,
}

impl ModelHandle {
    pub fn root(backend_kind: BackendKind, state_ref: impl Into<String>) -> Self {
        ModelHandle {
            backend_kind,
            state_ref: state_ref.into(),
            lineage: Vec::new(),
        }
    }

    pub fn child(&self, state_ref: impl Into<String>) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(self.state_ref.clone());
        ModelHandle {
            backend_kind: self.backend_kind,
            state_ref: state_ref.into(),
            lineage,
        }
    }

    /// Number of fine-tuning rounds between the root model and this one.
    pub fn generation(&self) -> usize {
        self.lineage.len()
    }

    pub fn parent_ref(&self) -> Option<&str> {
        self.lineage.last().map(String::as_str)
    }
}

impl fmt::Display for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.state_ref, self.generation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Contradict,
}

impl NliLabel {
    pub fn target(self) -> f64 {
        match self {
            NliLabel::Entail => 1.0,
            NliLabel::Contradict => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliTrainingPair {
    pub example_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// A scorer of (premise, hypothesis) entailment that can be fine-tuned.
///
/// Scoring is read-only and may run concurrently; `fine_tune` never mutates
/// the input handle.
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Placeholder used when masking premises for this model.
    fn unk_token(&self) -> &str;

    /// One entailment confidence in [0, 1] per hypothesis.
    fn score_entailment(
        &self,
        model: &ModelHandle,
        premise: &str,
        hypotheses: &[String],
    ) -> Result<Vec<f64>>;

    fn fine_tune(
        &self,
        model: &ModelHandle,
        pairs: &[NliTrainingPair],
        spec: &FineTuneSpec,
        seed: u64,
    ) -> Result<ModelHandle>;
}

pub(crate) fn check_score_request(premise: &str, hypotheses: &[String]) -> Result<()> {
    if premise.trim().is_empty() {
        return Err(Error::Validation("premise is empty".into()));
    }
    if hypotheses.is_empty() {
        return Err(Error::Validation("no hypotheses to score".into()));
    }
    Ok(())
}

/// Per-class distribution for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub classes: Vec<String>,
    /// Normalized class scores aligned with `classes`; they sum to 1.
    pub class_scores: Vec<f64>,
    pub top_class: String,
    pub second_class: String,
    pub delta: f64,
}

impl ScoredPrediction {
    /// Build from already-normalized scores aligned with `classes`.
    pub fn from_distribution(classes: &ClassSet, class_scores: Vec<f64>) -> Self {
        let (top, second) = rank::top_two(&class_scores);
        ScoredPrediction {
            classes: classes.names().to_vec(),
            top_class: classes.name(top).to_string(),
            second_class: classes.name(second).to_string(),
            delta: class_scores[top] - class_scores[second],
            class_scores,
        }
    }

    pub fn score(&self, class: &str) -> Option<f64> {
        let i = self.classes.iter().position(|c| c == class)?;
        Some(self.class_scores[i])
    }
}

/// Turn per-class entailment confidences into a class distribution: a
/// softmax over the confidences' logits, i.e. over entailment logits.
pub fn normalize_confidences(confidences: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = confidences.iter().map(|&p| rank::logit(p)).collect();
    rank::softmax(&logits)
}

/// Zero-shot classification: one hypothesis per class, highest normalized
/// entailment wins, ties resolved by class order.
pub fn classify(
    backend: &dyn Backend,
    model: &ModelHandle,
    text: &str,
    classes: &ClassSet,
    template: &HypothesisTemplate,
) -> Result<ScoredPrediction> {
    if classes.len() < 2 {
        return Err(Error::Config("classification needs at least 2 classes".into()));
    }
    let hypotheses = classes
        .names()
        .iter()
        .map(|c| template.render(c))
        .collect::<Result<Vec<_>>>()?;
    let confidences = backend.score_entailment(model, text, &hypotheses)?;
    if confidences.len() != hypotheses.len() {
        return Err(Error::Transport(format!(
            "backend returned {} confidences for {} hypotheses",
            confidences.len(),
            hypotheses.len()
        )));
    }
    Ok(ScoredPrediction::from_distribution(
        classes,
        normalize_confidences(&confidences),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Backend returning fixed per-hypothesis confidences.
    struct Fixed(Vec<f64>);

    impl Backend for Fixed {
        fn kind(&self) -> BackendKind {
            BackendKind::Mock
        }
        fn unk_token(&self) -> &str {
            "<unk>"
        }
        fn score_entailment(&self, _: &ModelHandle, premise: &str, h: &[String]) -> Result<Vec<f64>> {
            check_score_request(premise, h)?;
            Ok(self.0[..h.len()].to_vec())
        }
        fn fine_tune(&self, m: &ModelHandle, _: &[NliTrainingPair], _: &FineTuneSpec, _: u64) -> Result<ModelHandle> {
            Ok(m.child("x"))
        }
    }

    fn handle() -> ModelHandle {
        ModelHandle::root(BackendKind::Mock, "base")
    }

    #[test]
    fn argmax_and_delta_from_normalized_scores() {
        let classes = ClassSet::new("d", ["a", "b", "c"]).unwrap();
        let p = classify(&Fixed(vec![0.8, 0.1, 0.1]), &handle(), "t", &classes, &HypothesisTemplate::default()).unwrap();
        assert_eq!(p.top_class, "a");
        assert_eq!(p.second_class, "b");
        let sum: f64 = p.class_scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!((p.delta - (p.class_scores[0] - p.class_scores[1])).abs() < 1e-15);
        assert!(p.delta > 0.0);
    }

    #[test]
    fn exact_tie_goes_to_earlier_class() {
        let classes = ClassSet::new("d", ["x", "y"]).unwrap();
        let p = classify(&Fixed(vec![0.4, 0.4]), &handle(), "t", &classes, &HypothesisTemplate::default()).unwrap();
        assert_eq!((p.top_class.as_str(), p.second_class.as_str()), ("x", "y"));
        assert_eq!(p.delta, 0.0);
    }

    #[test]
    fn fig1_scenario() {
        let classes = ClassSet::new("isear", ["joy", "guilt", "anger"]).unwrap();
        let p = classify(
            &Fixed(vec![0.92, 0.31, 0.02]),
            &handle(),
            "I'm thrilled my paper got accepted!",
            &classes,
            &HypothesisTemplate::default(),
        )
        .unwrap();
        assert_eq!(p.top_class, "joy");
        assert_eq!(p.second_class, "guilt");
    }

    #[test]
    fn empty_premise_rejected() {
        let classes = ClassSet::new("d", ["x", "y"]).unwrap();
        let err = classify(&Fixed(vec![0.4, 0.4]), &handle(), " ", &classes, &HypothesisTemplate::default());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn lineage_grows_by_one() {
        let m = handle();
        let m1 = m.child("one");
        let m2 = m1.child("two");
        assert_eq!(m2.lineage, ["base", "one"]);
        assert_eq!(m2.parent_ref(), Some("one"));
        assert_eq!(m.generation(), 0);
    }
}
