//! Run manifests: the persisted record of a self-training run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ModelHandle;
use crate::config::{HypothesisTemplate, SelfTrainConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub seed: u64,
    pub n: usize,
    pub input_model: ModelHandle,
    pub output_model: ModelHandle,
    pub score_digest: String,
    pub pseudo_label_digest: String,
    pub pairs_digest: String,
    pub positives: usize,
    pub entail_pairs: usize,
    pub contradict_pairs: usize,
    /// Classes with no candidate positives this iteration.
    pub empty_classes: Vec<String>,
    pub masked_premises: usize,
    pub unmasked_premises: usize,
    pub duration_ms: u64,
    pub completed_at: String,
    /// Evaluation metrics attached after the fact (e.g. `test_accuracy`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: SelfTrainConfig,
    /// Digest over everything that must match for a resume.
    pub config_digest: String,
    pub dataset_id: String,
    pub template: HypothesisTemplate,
    pub classes: Vec<String>,
    pub corpus_size: usize,
    pub corpus_digest: String,
    pub base_model: ModelHandle,
    pub iterations: Vec<IterationRecord>,
    pub created_at: String,
    pub updated_at: String,
    /// Free-form context supplied by the caller, e.g. the effective CLI config.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
    /// Base-model metrics, e.g. zero-shot test accuracy.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub base_metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        self.iterations.len() as u32 >= self.config.iterations
    }

    /// Model produced by the last completed iteration, or the base model.
    pub fn latest_model(&self) -> &ModelHandle {
        self.iterations
            .last()
            .map(|r| &r.output_model)
            .unwrap_or(&self.base_model)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn exists(run_dir: &Path) -> bool {
        run_dir.join(MANIFEST_FILE).exists()
    }

    /// Write atomically (temp file + rename).
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(".manifest.json.tmp");
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
