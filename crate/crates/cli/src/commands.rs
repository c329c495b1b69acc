//! One function per subcommand. Each reads a validated [`RunConfig`],
//! writes its artifacts under `out_dir` and returns a summary.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hyperprompt_core::accounting::{count_enumerated, ParamReport};
use hyperprompt_core::analysis::{self, AnalysisReport};
use hyperprompt_core::checkpoint::{load_checkpoint_as, save_checkpoint};
use hyperprompt_core::data::{generate_task, write_jsonl, TaskData};
use hyperprompt_core::train::{
    self, metrics_csv, Evaluation, MetricsRow, TaskSet, TuneMode, DEVIATIONS,
};
use hyperprompt_core::{Error, Model, Result};
use serde::Serialize;
use serde_json::Value;

use crate::run_config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn generate(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    cfg.tasks.iter().map(generate_task).collect()
}

/// Task data as used by training, evaluation and analysis; identical to
/// what `gen-data` writes.
pub fn task_set(cfg: &RunConfig) -> Result<TaskSet> {
    Ok(TaskSet::from_data(&generate(cfg)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub files: Vec<PathBuf>,
}

/// Writes `data/train/<task>.jsonl` and `data/eval/<task>.jsonl`.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    // generate everything first so a bad spec fails before any file exists
    let data = generate(cfg)?;
    let mut files = Vec::new();
    for split in ["train", "eval"] {
        let dir = cfg.out_dir.join("data").join(split);
        ensure_dir(&dir)?;
        for d in &data {
            let path = dir.join(format!("{}.jsonl", d.spec.name));
            let samples = if split == "train" { &d.train } else { &d.eval };
            write_jsonl(&path, &d.spec.name, samples)?;
            files.push(path);
        }
    }
    Ok(GenDataSummary { files })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub backbone_count: usize,
    pub conditioned_count: usize,
    pub ratio: String,
}

impl From<&ParamReport> for ParamSummary {
    fn from(r: &ParamReport) -> Self {
        Self {
            backbone_count: r.backbone_count,
            conditioned_count: r.conditioned_count,
            ratio: r.ratio_display.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub config: RunConfig,
    pub seed: u64,
    pub deviations: Vec<String>,
    pub params: ParamSummary,
    pub backbone_hash_initial: String,
    pub backbone_hash_final: String,
    pub conditioning_hash_initial: String,
    pub conditioning_hash_final: String,
    /// Present for `tune_mode = task_only`: whether the backbone came out
    /// bit-identical.
    pub backbone_unchanged: Option<bool>,
    pub best: Vec<MetricsRow>,
    pub final_average: MetricsRow,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub params: ParamSummary,
    pub final_eval: Evaluation,
    pub backbone_unchanged: Option<bool>,
}

/// Trains from scratch; writes `checkpoint.json`, `metrics.csv` and
/// `metadata.json`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let tasks = task_set(cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    tasks.check_against(&model)?;
    ensure_dir(&cfg.out_dir)?;
    let (bb0, cond0) = (
        model.params().backbone_hash(),
        model.params().conditioning_hash(),
    );
    let report = train::train_with(&mut model, &tasks, &cfg.train, |step, loss| {
        if step % 500 == 0 {
            log::info!("step {step}: loss {loss:.4}");
        }
    })?;
    let (bb1, cond1) = (
        model.params().backbone_hash(),
        model.params().conditioning_hash(),
    );
    let backbone_unchanged = (cfg.train.tune_mode == TuneMode::TaskOnly).then_some(bb0 == bb1);
    let params = ParamSummary::from(&count_enumerated(&model));

    save_checkpoint(&model, &cfg.out_dir.join("checkpoint.json"))?;
    write(
        &cfg.out_dir.join("metrics.csv"),
        metrics_csv(&report.history)?,
    )?;
    let meta = Metadata {
        config: cfg.clone(),
        seed: cfg.seed,
        deviations: DEVIATIONS.iter().map(|s| s.to_string()).collect(),
        params: params.clone(),
        backbone_hash_initial: bb0,
        backbone_hash_final: bb1,
        conditioning_hash_initial: cond0,
        conditioning_hash_final: cond1,
        backbone_unchanged,
        best: report.best.clone(),
        final_average: report.final_eval.average.clone(),
        started_unix,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join("metadata.json"), &meta)?;
    Ok(TrainSummary {
        out_dir: cfg.out_dir.clone(),
        params,
        final_eval: report.final_eval,
        backbone_unchanged,
    })
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    load_checkpoint_as(&cfg.checkpoint_path(), &cfg.model)
}

/// Evaluates the checkpoint on every eval set; writes `eval.csv`.
pub fn eval(cfg: &RunConfig) -> Result<Evaluation> {
    let model = load_model(cfg)?;
    let tasks = task_set(cfg)?;
    tasks.check_against(&model)?;
    let step = 0;
    let evaluation = train::evaluate(&model, &tasks, step, None)?;
    ensure_dir(&cfg.out_dir)?;
    let rows: Vec<MetricsRow> = evaluation.rows().cloned().collect();
    write(&cfg.out_dir.join("eval.csv"), metrics_csv(&rows)?)?;
    Ok(evaluation)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub conditioned_params: Option<usize>,
    pub average_loss: Option<f64>,
    pub average_token_acc: Option<f64>,
    pub average_exact_match: Option<f64>,
    pub error: String,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One training run per distinct axis value, in the given order; failed
/// runs are recorded and the sweep continues. Writes `sweep.csv`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let axis = cfg
        .sweep
        .axis
        .ok_or_else(|| Error::Config("sweep.axis must be set".into()))?;
    if cfg.sweep.values.is_empty() {
        return Err(Error::Config("sweep.values must not be empty".into()));
    }
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for v in &cfg.sweep.values {
        if seen.insert(v.to_string()) {
            values.push(v.clone());
        } else {
            log::warn!(
                "sweep: dropping duplicate value {v} for axis {}",
                axis.name()
            );
        }
    }
    // reject malformed values before any training starts
    for v in &values {
        if let Err(e) = cfg.with_axis(axis, v) {
            if matches!(e, Error::Config(ref m) if m.starts_with("sweep value")) {
                return Err(e);
            }
        }
    }
    ensure_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for v in &values {
        let label = value_label(v);
        let result = cfg.with_axis(axis, v).and_then(|mut sub| {
            sub.out_dir = cfg
                .out_dir
                .join("sweep")
                .join(format!("{}-{label}", axis.name()));
            train(&sub)
        });
        let row = match result {
            Ok(s) => SweepRow {
                axis: axis.name().into(),
                value: label,
                status: "ok".into(),
                conditioned_params: Some(s.params.conditioned_count),
                average_loss: Some(s.final_eval.average.loss),
                average_token_acc: Some(s.final_eval.average.token_acc),
                average_exact_match: Some(s.final_eval.average.exact_match),
                error: String::new(),
            },
            Err(e) => {
                log::error!("sweep {}={label} failed: {e}", axis.name());
                SweepRow {
                    axis: axis.name().into(),
                    value: label,
                    status: "failed".into(),
                    conditioned_params: None,
                    average_loss: None,
                    average_token_acc: None,
                    average_exact_match: None,
                    error: e.to_string(),
                }
            }
        };
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    write(&cfg.out_dir.join("sweep.csv"), bytes)?;
    Ok(rows)
}

/// Parameter report of the configured model; writes `params.json`.
pub fn count_params(cfg: &RunConfig) -> Result<ParamReport> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let report = count_enumerated(&model);
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("params.json"), &report)?;
    Ok(report)
}

/// Instruments the checkpoint on eval examples; writes the per-head dump
/// `attention.jsonl` and the aggregated `analysis.json`.
pub fn analyze(cfg: &RunConfig) -> Result<AnalysisReport> {
    let model = load_model(cfg)?;
    let tasks = task_set(cfg)?;
    tasks.check_against(&model)?;
    let idx = match &cfg.analyze.task {
        Some(name) => tasks
            .names
            .iter()
            .position(|n| n == name)
            .expect("validated"),
        None => 0,
    };
    let eval = &tasks.eval[idx];
    let examples = &eval[..cfg.analyze.examples.min(eval.len())];
    let records = analysis::collect_records(&model, examples, &analysis::default_stacks(&model))?;
    ensure_dir(&cfg.out_dir)?;
    analysis::write_records(&cfg.out_dir.join("attention.jsonl"), &records)?;
    let report = analysis::report(&records)?;
    write_json(&cfg.out_dir.join("analysis.json"), &report)?;
    Ok(report)
}
