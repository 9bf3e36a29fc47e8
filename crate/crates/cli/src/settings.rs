//! Run configuration: built-in defaults, then the JSON config file, then
//! command-line overrides, in that order.

use std::path::{Path, PathBuf};

use selftrain::backend::SubprocessConfig;
use selftrain::datasets::CorpusSource;
use selftrain::{HypothesisTemplate, SelfTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Dataset id; selects the class names from the registry.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Extra registry file mapping dataset ids to class lists.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub unlabeled: Option<CorpusSource>,
    #[serde(default)]
    pub test: Option<CorpusSource>,
    /// Cap on the unlabeled pool; larger pools are subsampled with the run seed.
    #[serde(default)]
    pub max_unlabeled: Option<usize>,
    #[serde(default)]
    pub template: HypothesisTemplate,
    #[serde(default)]
    pub backend: BackendSettings,
    #[serde(default)]
    pub self_train: SelfTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSettings {
    /// Embedding-similarity scorer; needs `SELFTRAIN_EMBEDDINGS`.
    Mock {
        /// JSON file with the initial mock state (scale and biases).
        #[serde(default)]
        state: Option<PathBuf>,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Subprocess(SubprocessConfig),
}

fn default_scale() -> f64 {
    4.0
}

impl Default for BackendSettings {
    fn default() -> Self {
        BackendSettings::Mock {
            state: None,
            scale: default_scale(),
        }
    }
}

/// Flags that mirror a config key.
#[derive(Debug, Default, Clone)]
pub struct FlagOverrides {
    pub dataset: Option<String>,
    pub template: Option<String>,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
    pub fraction: Option<f64>,
    pub masking: Option<bool>,
    /// `dotted.key=value` pairs; values parse as JSON, else as strings.
    pub set: Vec<String>,
}

impl FlagOverrides {
    fn pairs(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("dataset", self.dataset.clone().map(Value::from));
        push("template", self.template.clone().map(Value::from));
        push("self_train.contrast_strategy", self.strategy.clone().map(Value::from));
        push("self_train.seed", self.seed.map(Value::from));
        push("self_train.iterations", self.iterations.map(Value::from));
        push("self_train.per_class_fraction", self.fraction.map(Value::from));
        push("self_train.masking_enabled", self.masking.map(Value::from));
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{item}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            out.push((key.trim().to_string(), value));
        }
        Ok(out)
    }
}

fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{dotted}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{dotted}`: `{part}` is not inside an object")))?;
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("`{dotted}` does not name an object field")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Merge the config file (if any) and overrides, then fill defaults.
pub fn resolve(path: Option<&Path>, flags: &FlagOverrides) -> Result<Settings, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for (key, value) in flags.pairs()? {
        set_path(&mut root, &key, value)?;
    }
    let settings: Settings =
        serde_json::from_value(root).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    settings.self_train.validate()?;
    Ok(settings)
}
