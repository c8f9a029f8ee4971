use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::span::SpanCorruptionConfig;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::train::optim::OptimizerConfig;
use crate::train::schedule::ScheduleConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mlm,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training files: plain text for `mlm`, JSON lines for `qa`.
    pub train: Vec<PathBuf>,
    pub valid: Vec<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Maximum decoder length for `qa` targets and generation.
    pub target_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: Vec::new(),
            valid: Vec::new(),
            vocab: None,
            target_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop (with a checkpoint) after this many optimizer steps. The
    /// learning-rate schedule is still laid out over all `epochs`.
    pub max_steps: Option<u64>,
    pub log_every: u64,
    pub eval_every_epochs: usize,
    /// Evaluate on at most this many validation examples.
    pub eval_max_examples: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 160,
            epochs: 100,
            max_steps: None,
            log_every: 10,
            eval_every_epochs: 1,
            eval_max_examples: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run needs. Serializes losslessly; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub task: Task,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub span: SpanCorruptionConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            task: Task::Mlm,
            seed: 42,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            span: SpanCorruptionConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.span.validate()?;
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if self.data.target_len == 0 {
            return Err(Error::Config("data.target_len must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides addressed by dotted paths
    /// (`model.d_model=64`). Values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Every leaf key as `(dotted.path, default JSON value)`.
    pub fn keys() -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(m) => {
                    for (k, child) in m {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&p, child, out);
                    }
                }
                leaf => out.push((prefix.to_string(), leaf.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(RunConfig::default()).expect("serializes"), &mut out);
        out
    }
}
