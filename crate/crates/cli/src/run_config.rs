//! The run configuration: model, training, tasks and per-command options,
//! read from JSON and adjusted by `--set key=value` overrides.

use std::path::{Path, PathBuf};

use hyperprompt_core::config::{ModelConfig, Placement, Variant};
use hyperprompt_core::data::{default_tasks, TaskSpec, Tokenizer};
use hyperprompt_core::train::TrainConfig;
use hyperprompt_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PromptLenEnc,
    PromptLenDec,
    Placement,
    Variant,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PromptLenEnc => "prompt_len_enc",
            SweepAxis::PromptLenDec => "prompt_len_dec",
            SweepAxis::Placement => "placement",
            SweepAxis::Variant => "variant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SweepOptions {
    pub axis: Option<SweepAxis>,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeOptions {
    /// Number of eval examples to instrument.
    pub examples: usize,
    /// Task whose eval set is used; the first task when unset.
    pub task: Option<String>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            examples: 100,
            task: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization; `--seed` also sets `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint read by `eval` and `analyze`; `<out_dir>/checkpoint.json`
    /// when unset.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    pub sweep: SweepOptions,
    pub analyze: AnalyzeOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tasks: default_tasks(),
            sweep: SweepOptions::default(),
            analyze: AnalyzeOptions::default(),
        }
    }
}

/// Parses the right-hand side of an override: JSON when it parses, a plain
/// string otherwise (so `model.variant=global` needs no quotes).
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON tree. Array elements are addressed by
/// index (`tasks.0.train_size=10`).
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key {key:?} has an empty segment"
        )));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if node.is_null() {
            // an unset optional section
            *node = Value::Object(Default::default());
        }
        let child = match node {
            Value::Object(map) => map.entry(part.to_string()).or_insert(if last {
                Value::Null
            } else {
                Value::Object(Default::default())
            }),
            Value::Array(items) => {
                let len = items.len();
                let idx: usize = part.parse().map_err(|_| {
                    Error::Config(format!("override {key}: {part:?} is not an index"))
                })?;
                items.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("override {key}: index {idx} out of range ({len})"))
                })?
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {key}: {} is not a section",
                    parts[..i].join(".")
                )))
            }
        };
        if last {
            *child = parse_value(raw);
            return Ok(());
        }
        node = child;
    }
    unreachable!("loop returns on the last segment")
}

fn field_error(e: serde_json::Error) -> Error {
    Error::Config(format!("invalid run configuration: {e}"))
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies overrides in order, then
    /// `--out` and `--seed`, and validates the result.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        out: Option<&Path>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<RunConfig>(&text).map_err(field_error)?
            }
            None => RunConfig::default(),
        };
        let mut tree = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(field_error)?;
        if let Some(out) = out {
            cfg.out_dir = out.to_path_buf();
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks must list at least one task".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!(
                    "tasks: duplicate task name {:?}",
                    t.name
                )));
            }
            if t.name.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!(
                    "tasks: name {:?} may not contain '/', '\\\\' or ','",
                    t.name
                )));
            }
        }
        if self.model.num_tasks != self.tasks.len() {
            return Err(Error::Config(format!(
                "model.num_tasks is {} but {} tasks are configured",
                self.model.num_tasks,
                self.tasks.len()
            )));
        }
        let vocab = Tokenizer::new().vocab_size();
        if self.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model.vocab_size must be {vocab} for the task alphabet, got {}",
                self.model.vocab_size
            )));
        }
        if self.analyze.examples == 0 {
            return Err(Error::Config("analyze.examples must be positive".into()));
        }
        if let Some(task) = &self.analyze.task {
            if !self.tasks.iter().any(|t| &t.name == task) {
                return Err(Error::Config(format!(
                    "analyze.task {task:?} is not a configured task"
                )));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    /// This configuration with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: &Value) -> Result<Self> {
        let mut cfg = self.clone();
        let bad = || {
            Error::Config(format!(
                "sweep value {value} is not valid for axis {}",
                axis.name()
            ))
        };
        match axis {
            SweepAxis::PromptLenEnc | SweepAxis::PromptLenDec => {
                let l = value.as_u64().ok_or_else(bad)? as usize;
                if axis == SweepAxis::PromptLenEnc {
                    cfg.model.prompt_len_enc = Some(l);
                } else {
                    cfg.model.prompt_len_dec = Some(l);
                }
            }
            SweepAxis::Placement => {
                cfg.model.placement =
                    serde_json::from_value::<Placement>(value.clone()).map_err(|_| bad())?;
            }
            SweepAxis::Variant => {
                cfg.model.variant =
                    serde_json::from_value::<Variant>(value.clone()).map_err(|_| bad())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
