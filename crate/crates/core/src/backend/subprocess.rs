//! Line-delimited JSON adapter to an external NLI model process.
//!
//! Every request is one JSON object on the child's stdin and every response
//! one JSON object on its stdout:
//!
//! ```text
//! {"premise": "...", "hypotheses": ["..."], "checkpoint": null}   -> {"confidences": [0.91, ...]}
//! {"op": "info"}                                                  -> {"unk_token": "<unk>"}
//! {"op": "fine_tune", "checkpoint": null, "pairs": "p.jsonl",
//!  "output": "dir", "spec": {...}, "seed": 3}                     -> {"checkpoint": "dir"}
//! ```
//!
//! Any response may instead be `{"error": "message"}`. A `null` checkpoint
//! means the base model named at startup.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{check_score_request, Backend, BackendKind, ModelHandle, NliTrainingPair};
use crate::config::FineTuneSpec;
use crate::error::{Error, Result};

/// State reference of the unmodified base model.
pub const BASE_REF: &str = "base";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessConfig {
    /// Program and arguments, e.g. `["python3", "scripts/nli_adapter.py"]`.
    pub command: Vec<String>,
    /// Model identifier passed as `--model`.
    pub model: String,
    #[serde(default = "default_device")]
    pub device: String,
}

fn default_device() -> String {
    "cpu".to_string()
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct SubprocessBackend {
    config: SubprocessConfig,
    checkpoint_root: PathBuf,
    process: Mutex<Process>,
    unk_token: String,
}

impl SubprocessBackend {
    pub fn spawn(config: SubprocessConfig, checkpoint_root: impl Into<PathBuf>) -> Result<Self> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| Error::Config("subprocess backend needs a command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .args(["--model", &config.model, "--device", &config.device])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = SubprocessBackend {
            config,
            checkpoint_root: checkpoint_root.into(),
            process: Mutex::new(Process {
                child,
                stdin,
                stdout,
            }),
            unk_token: String::new(),
        };
        let info = backend.request(&json!({"op": "info"}))?;
        backend.unk_token = info
            .get("unk_token")
            .and_then(Value::as_str)
            .unwrap_or("<unk>")
            .to_string();
        Ok(backend)
    }

    pub fn base_model(&self) -> ModelHandle {
        ModelHandle::root(BackendKind::TransformerAdapter, BASE_REF)
    }

    pub fn model_id(&self) -> &str {
        &self.config.model
    }

    fn checkpoint_path(&self, model: &ModelHandle) -> Option<PathBuf> {
        (model.state_ref != BASE_REF).then(|| self.checkpoint_root.join(&model.state_ref))
    }

    fn request(&self, body: &Value) -> Result<Value> {
        let mut proc = self.process.lock().expect("adapter process lock");
        let mut line = serde_json::to_string(body)?;
        line.push('\n');
        proc.stdin
            .write_all(line.as_bytes())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| Error::Transport(format!("write to adapter failed: {e}")))?;
        let mut response = String::new();
        let n = proc
            .stdout
            .read_line(&mut response)
            .map_err(|e| Error::Transport(format!("read from adapter failed: {e}")))?;
        if n == 0 {
            return Err(Error::Transport("adapter closed its output".into()));
        }
        let value: Value = serde_json::from_str(response.trim())
            .map_err(|e| Error::Transport(format!("malformed adapter response: {e}")))?;
        if let Some(err) = value.get("error") {
            return Err(Error::Transport(format!("adapter error: {err}")));
        }
        Ok(value)
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Ok(proc) = self.process.get_mut() {
            let _ = proc.child.kill();
            let _ = proc.child.wait();
        }
    }
}

fn write_pairs(path: &Path, pairs: &[NliTrainingPair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Storage(format!("cannot write {}: {e}", path.display())))
}

impl Backend for SubprocessBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::TransformerAdapter
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
        let response = self.request(&json!({
            "premise": premise,
            "hypotheses": hypotheses,
            "checkpoint": self.checkpoint_path(model),
        }))?;
        let confidences: Vec<f64> = response
            .get("confidences")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Transport(format!("bad confidences: {e}")))?
            .ok_or_else(|| Error::Transport("response has no `confidences`".into()))?;
        if confidences.len() != hypotheses.len() {
            return Err(Error::Transport(format!(
                "adapter returned {} confidences for {} hypotheses",
                confidences.len(),
                hypotheses.len()
            )));
        }
        if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Transport(format!("confidence {bad} outside [0, 1]")));
        }
        Ok(confidences)
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
        let mut hasher = Sha256::new();
        hasher.update(model.state_ref.as_bytes());
        hasher.update(seed.to_le_bytes());
        hasher.update(serde_json::to_vec(pairs)?);
        hasher.update(serde_json::to_vec(spec)?);
        let state_ref = hex::encode(&hasher.finalize()[..12]);

        std::fs::create_dir_all(&self.checkpoint_root).map_err(|e| {
            Error::Storage(format!("cannot create {}: {e}", self.checkpoint_root.display()))
        })?;
        let pairs_path = self.checkpoint_root.join(format!("{state_ref}.pairs.jsonl"));
        write_pairs(&pairs_path, pairs)?;
        let output = self.checkpoint_root.join(&state_ref);
        self.request(&json!({
            "op": "fine_tune",
            "checkpoint": self.checkpoint_path(model),
            "pairs": pairs_path,
            "output": output,
            "spec": spec,
            "seed": seed,
        }))?;
        if !output.exists() {
            return Err(Error::Storage(format!(
                "adapter did not write checkpoint {}",
                output.display()
            )));
        }
        Ok(model.child(state_ref))
    }
}
