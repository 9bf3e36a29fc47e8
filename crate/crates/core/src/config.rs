//! Domain types shared by every stage: class sets, the hypothesis template
//! and the self-training configuration.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder replaced by the class name when rendering a hypothesis.
pub const SLOT: &str = "[]";

/// Template used when none is configured.
pub const DEFAULT_TEMPLATE: &str = "This example is [].";

/// Ordered, normalized set of target class names for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawClassSet")]
pub struct ClassSet {
    dataset_id: String,
    names: Vec<String>,
}

#[derive(Deserialize)]
struct RawClassSet {
    dataset_id: String,
    names: Vec<String>,
}

impl TryFrom<RawClassSet> for ClassSet {
    type Error = Error;

    fn try_from(raw: RawClassSet) -> Result<Self> {
        ClassSet::new(raw.dataset_id, raw.names)
    }
}

/// Trim and lowercase a class name or label.
pub fn normalize_class_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl ClassSet {
    pub fn new<I, S>(dataset_id: impl Into<String>, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let dataset_id = dataset_id.into();
        let names: Vec<String> = names
            .into_iter()
            .map(|n| normalize_class_name(n.as_ref()))
            .collect();
        if let Some(pos) = names.iter().position(String::is_empty) {
            return Err(Error::Config(format!(
                "class set `{dataset_id}`: class name #{pos} is empty"
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!(
                    "class set `{dataset_id}`: duplicate class `{name}`"
                )));
            }
        }
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "class set `{dataset_id}` needs at least 2 classes, got {}",
                names.len()
            )));
        }
        Ok(ClassSet { dataset_id, names })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

/// A hypothesis pattern with exactly one [`SLOT`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HypothesisTemplate {
    prefix: String,
    suffix: String,
}

impl HypothesisTemplate {
    pub fn new(pattern: &str) -> Result<Self> {
        let slots = pattern.matches(SLOT).count();
        if slots != 1 {
            return Err(Error::Config(format!(
                "hypothesis template {pattern:?} must contain exactly one `{SLOT}` slot, found {slots}"
            )));
        }
        let (prefix, suffix) = pattern.split_once(SLOT).expect("slot counted above");
        Ok(HypothesisTemplate {
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn pattern(&self) -> String {
        format!("{}{SLOT}{}", self.prefix, self.suffix)
    }

    pub fn render(&self, class_name: &str) -> Result<String> {
        if class_name.is_empty() {
            return Err(Error::Validation(
                "cannot render a hypothesis for an empty class name".into(),
            ));
        }
        Ok(format!("{}{class_name}{}", self.prefix, self.suffix))
    }

    /// Inverse of [`render`](Self::render): recover the class name from a hypothesis.
    pub fn extract<'a>(&self, hypothesis: &'a str) -> Option<&'a str> {
        let inner = hypothesis
            .strip_prefix(self.prefix.as_str())?
            .strip_suffix(self.suffix.as_str())?;
        (!inner.is_empty()).then_some(inner)
    }
}

impl Default for HypothesisTemplate {
    fn default() -> Self {
        HypothesisTemplate::new(DEFAULT_TEMPLATE).expect("default template is well-formed")
    }
}

impl TryFrom<String> for HypothesisTemplate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        HypothesisTemplate::new(&s)
    }
}

impl From<HypothesisTemplate> for String {
    fn from(t: HypothesisTemplate) -> String {
        t.pattern()
    }
}

impl fmt::Display for HypothesisTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{SLOT}{}", self.prefix, self.suffix)
    }
}

/// Free-function form of [`HypothesisTemplate::render`].
pub fn render_hypothesis(template: &HypothesisTemplate, class_name: &str) -> Result<String> {
    template.render(class_name)
}

/// How contradict pairs are built for each selected positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastStrategy {
    /// One other class drawn uniformly at random.
    Random,
    /// The second-ranked class of the example.
    Closest,
    /// The lowest-ranked class of the example.
    Furthest,
    /// Every other class.
    All,
}

impl ContrastStrategy {
    pub const ALL_STRATEGIES: [ContrastStrategy; 4] = [
        ContrastStrategy::Random,
        ContrastStrategy::Closest,
        ContrastStrategy::Furthest,
        ContrastStrategy::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContrastStrategy::Random => "random",
            ContrastStrategy::Closest => "closest",
            ContrastStrategy::Furthest => "furthest",
            ContrastStrategy::All => "all",
        }
    }
}

impl fmt::Display for ContrastStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ContrastStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(ContrastStrategy::Random),
            "closest" => Ok(ContrastStrategy::Closest),
            "furthest" => Ok(ContrastStrategy::Furthest),
            "all" => Ok(ContrastStrategy::All),
            other => Err(Error::Config(format!(
                "unknown contrast strategy `{other}` (expected random, closest, furthest or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
}

/// Fine-tuning hyperparameters. Defaults: one epoch, lr 2e-5, batch 32,
/// AdamW, cross entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneSpec {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub optimizer: Optimizer,
    pub loss: Loss,
}

impl Default for FineTuneSpec {
    fn default() -> Self {
        FineTuneSpec {
            epochs: 1,
            learning_rate: 2e-5,
            batch_size: 32,
            optimizer: Optimizer::AdamW,
            loss: Loss::CrossEntropy,
        }
    }
}

impl FineTuneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("fine_tune.epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "fine_tune.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("fine_tune.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainConfig {
    /// Positives per class as a fraction of the unlabeled pool.
    pub per_class_fraction: f64,
    pub iterations: u32,
    pub contrast_strategy: ContrastStrategy,
    pub masking_enabled: bool,
    pub seed: u64,
    pub fine_tune: FineTuneSpec,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            per_class_fraction: 0.01,
            iterations: 2,
            contrast_strategy: ContrastStrategy::Random,
            masking_enabled: true,
            seed: 0,
            fine_tune: FineTuneSpec::default(),
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.per_class_fraction;
        if !(f.is_finite() && f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "per_class_fraction must be in (0, 1], got {f}"
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        self.fine_tune.validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let config: SelfTrainConfig = serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("invalid self-training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Number of positives to select per class for a pool of `corpus_size`.
    pub fn resolve_n(&self, corpus_size: usize) -> usize {
        resolve_n(self.per_class_fraction, corpus_size)
    }
}

/// `ceil(fraction * corpus_size)`, never below 1 for a non-empty pool.
///
/// Products within 1e-9 (relative) of an integer are snapped first so that
/// e.g. 0.07 * 100 yields 7 rather than 8.
pub fn resolve_n(per_class_fraction: f64, corpus_size: usize) -> usize {
    if corpus_size == 0 {
        return 0;
    }
    let exact = per_class_fraction * corpus_size as f64;
    let nearest = exact.round();
    let n = if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    (n as usize).clamp(1, corpus_size)
}
