//! Self-training for entailment-based zero-shot text classifiers.
//!
//! The pipeline scores an unlabeled pool with an NLI model, keeps each
//! class's most confident predictions (largest top-vs-second margin), builds
//! entail/contradict pairs (optionally masking the token closest to the
//! class name), fine-tunes, and repeats with the new model.

pub mod backend;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod masking;
pub mod rank;
pub mod selection;
pub mod selftrain;
pub mod synthetic;

pub use backend::{classify, Backend, BackendKind, ModelHandle, NliLabel, NliTrainingPair, ScoredPrediction};
pub use config::{ClassSet, ContrastStrategy, FineTuneSpec, HypothesisTemplate, SelfTrainConfig};
pub use datasets::{Corpus, CorpusRole, Example, LabeledExample, Registry};
pub use error::{Error, Result};
