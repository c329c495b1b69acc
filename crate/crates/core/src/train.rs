//! Multi-task training loop, optimizers and per-task evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, MixingSampler, TaskData, Tokenizer, PAD};
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::model::{Batch, Model};
use crate::params::{is_conditioned, Binder, ParamStore};
use crate::rng;

/// Departures from the reference training recipe, echoed into run metadata.
pub const DEVIATIONS: &[&str] = &[
    "optimizer: Adam (beta1 0.9, beta2 0.999, eps 1e-8) at constant learning rate instead of Adafactor",
    "mixing: one task per batch drawn proportionally to training-set size (per-example mixing is optional)",
    "loss: unweighted token cross-entropy, padding ignored",
    "best checkpoint per task: reported as the per-task maximum over evaluation points",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Backbone and task-conditioned parameters.
    All,
    /// Task-conditioned parameters only; the backbone stays bit-identical.
    TaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub tune_mode: TuneMode,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
    /// Draw the task per example instead of per batch.
    pub mix_within_batch: bool,
    /// Cap on eval examples per task at intermediate evaluation points.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            tune_mode: TuneMode::All,
            eval_every: 1000,
            seed: 0,
            mix_within_batch: false,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("train.steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        // lr = 0 is allowed as an explicit null update
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("train.lr must be a finite non-negative number"));
        }
        if self.eval_limit == Some(0) {
            return Err(config_err!("train.eval_limit must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// SGD or Adam over named parameters. Adam keeps a step count per parameter,
/// so a parameter that sits out a step (another task's adapter) is not
/// bias-corrected as if it had been updated.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    state: BTreeMap<String, Moments>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update. Elements whose update is exactly zero are left
    /// untouched, which keeps `-0.0` weights bit-identical under `lr = 0`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (path, grad) in grads {
            let param = store.get_mut(path)?;
            if param.numel() != grad.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {path} has {} elements, parameter has {}",
                    grad.len(),
                    param.numel()
                )));
            }
            let data = param.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in data.iter_mut().zip(grad) {
                        let delta = self.lr * g;
                        if delta != 0.0 {
                            *p -= delta;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.state.entry(path.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let c1 = 1.0 - BETA1.powi(st.t);
                    let c2 = 1.0 - BETA2.powi(st.t);
                    for ((p, &g), (m, v)) in data
                        .iter_mut()
                        .zip(grad)
                        .zip(st.m.iter_mut().zip(st.v.iter_mut()))
                    {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let delta = self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                        if delta != 0.0 {
                            *p -= delta;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tokenized train and eval splits of every task, indexed by task id.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub names: Vec<String>,
    pub train: Vec<Vec<Example>>,
    pub eval: Vec<Vec<Example>>,
}

impl TaskSet {
    pub fn from_data(data: &[TaskData]) -> Self {
        let tok = Tokenizer::new();
        let mut set = TaskSet {
            names: vec![],
            train: vec![],
            eval: vec![],
        };
        for (i, d) in data.iter().enumerate() {
            let (tr, ev) = d.encoded(&tok, i);
            set.names.push(d.spec.name.clone());
            set.train.push(tr);
            set.eval.push(ev);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Checks that `model` can consume every example of the set.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let t = model.config().num_tasks;
        if self.len() != t {
            return Err(config_err!(
                "model.num_tasks is {t} but {} tasks are configured",
                self.len()
            ));
        }
        if let Some(i) = self.train.iter().position(Vec::is_empty) {
            return Err(config_err!(
                "task {} has no training examples",
                self.names[i]
            ));
        }
        let cfg = model.config();
        let (mut enc, mut dec) = (0, 0);
        for ex in self.train.iter().chain(&self.eval).flatten() {
            enc = enc.max(ex.input_ids.len());
            dec = dec.max(ex.target_ids.len());
        }
        let prompts = cfg.input_prompt_len();
        if enc + prompts > cfg.max_enc_len {
            return Err(config_err!(
                "model.max_enc_len ({}) is below the longest encoder input ({enc} tokens + {prompts} prompts)",
                cfg.max_enc_len
            ));
        }
        if dec > cfg.max_dec_len {
            return Err(config_err!(
                "model.max_dec_len ({}) is below the longest target ({dec} tokens)",
                cfg.max_dec_len
            ));
        }
        Ok(())
    }
}

/// Metrics for one task at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub token_acc: f64,
    pub exact_match: f64,
}

pub const METRICS_HEADER: &str = "step,task,loss,token_acc,exact_match";
pub const AVERAGE_TASK: &str = "average";

/// Renders rows as CSV with [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-task rows followed by the unweighted cross-task average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tasks: Vec<MetricsRow>,
    pub average: MetricsRow,
}

impl Evaluation {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.tasks.iter().chain(std::iter::once(&self.average))
    }

    pub fn task(&self, name: &str) -> Option<&MetricsRow> {
        self.tasks.iter().find(|r| r.task == name)
    }
}

const EVAL_CHUNK: usize = 100;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced loss and token accuracy, plus greedy exact match, per
/// task. At most `limit` examples of each eval set are used.
pub fn evaluate(
    model: &Model,
    tasks: &TaskSet,
    step: usize,
    limit: Option<usize>,
) -> Result<Evaluation> {
    let v = model.config().vocab_size;
    let mut rows = Vec::with_capacity(tasks.len());
    for (name, eval) in tasks.names.iter().zip(&tasks.eval) {
        let eval = &eval[..limit.map_or(eval.len(), |l| l.min(eval.len()))];
        let (mut loss_sum, mut tokens, mut correct, mut exact) = (0.0, 0usize, 0usize, 0usize);
        for chunk in eval.chunks(EVAL_CHUNK) {
            let batch = Batch::from_examples(chunk);
            let mut g = Graph::new();
            let mut binder = Binder::frozen(model.params());
            let (loss, pass) = model.loss(&mut g, &mut binder, &batch)?;
            let targets = batch.flat_targets();
            let n = targets.iter().filter(|&&t| t != PAD).count();
            loss_sum += g.value(loss)[0] * n as f64;
            tokens += n;
            let logits = g.value(pass.logits);
            correct += targets
                .iter()
                .enumerate()
                .filter(|&(i, &t)| t != PAD && argmax(&logits[i * v..(i + 1) * v]) == t)
                .count();

            let inputs: Vec<(&[usize], usize)> = chunk
                .iter()
                .map(|e| (e.input_ids.as_slice(), e.task))
                .collect();
            let decoded = model.greedy_decode_batch(&inputs, model.config().max_dec_len)?;
            exact += decoded
                .iter()
                .zip(chunk)
                .filter(|(d, e)| d.as_slice() == &e.target_ids[..e.target_ids.len() - 1])
                .count();
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        rows.push(MetricsRow {
            step,
            task: name.clone(),
            loss: if tokens == 0 {
                0.0
            } else {
                loss_sum / tokens as f64
            },
            token_acc: ratio(correct, tokens),
            exact_match: ratio(exact, eval.len()),
        });
    }
    let mean = |f: fn(&MetricsRow) -> f64| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        }
    };
    let average = MetricsRow {
        step,
        task: AVERAGE_TASK.to_string(),
        loss: mean(|r| r.loss),
        token_acc: mean(|r| r.token_acc),
        exact_match: mean(|r| r.exact_match),
    };
    Ok(Evaluation {
        tasks: rows,
        average,
    })
}

/// Everything a training run produces besides the updated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Every evaluation row, in order, including averages.
    pub history: Vec<MetricsRow>,
    /// Per-task row with the highest exact match over all evaluation points.
    pub best: Vec<MetricsRow>,
    pub final_eval: Evaluation,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

fn sample_batch(
    tasks: &TaskSet,
    sampler: &mut MixingSampler,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    per_example: bool,
) -> Batch {
    let mut task = sampler.next().expect("infinite sampler");
    let mut picked = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        if per_example && i > 0 {
            task = sampler.next().expect("infinite sampler");
        }
        let pool = &tasks.train[task];
        picked.push(&pool[rng.random_range(0..pool.len())]);
    }
    Batch::from_examples(picked)
}

fn non_finite(step: usize, loss: f64, store: &ParamStore) -> Error {
    let norms: Vec<String> = store
        .norms()
        .into_iter()
        .map(|(p, n)| format!("{p}={n:.4e}"))
        .collect();
    Error::NonFinite(format!(
        "loss {loss} at step {step}; parameter norms: {}",
        norms.join(", ")
    ))
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &Batch,
    mode: TuneMode,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let grads = {
        let mut binder = match mode {
            TuneMode::All => Binder::trainable(model.params()),
            TuneMode::TaskOnly => Binder::with_filter(model.params(), is_conditioned),
        };
        let (loss, _) = model.loss(&mut g, &mut binder, batch)?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(non_finite(step, value, model.params()));
        }
        g.backward(loss)?;
        let grads = binder.gradients(&g);
        (value, grads)
    };
    opt.step(model.params_mut(), &grads.1)?;
    Ok(grads.0)
}

/// Trains `model` on `tasks`, evaluating every `eval_every` steps and after
/// the last step. `on_step` sees every step's loss.
pub fn train_with(
    model: &mut Model,
    tasks: &TaskSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    tasks.check_against(model)?;
    let sizes: Vec<usize> = tasks.train.iter().map(Vec::len).collect();
    let mut sampler = MixingSampler::new(&sizes, cfg.seed)?;
    let mut rng = rng::stream(cfg.seed, "batches");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut history = Vec::new();
    let mut best: Vec<Option<MetricsRow>> = vec![None; tasks.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut record = |eval: &Evaluation, history: &mut Vec<MetricsRow>| {
        for (b, r) in best.iter_mut().zip(&eval.tasks) {
            if b.as_ref().is_none_or(|b| r.exact_match > b.exact_match) {
                *b = Some(r.clone());
            }
        }
        history.extend(eval.rows().cloned());
    };
    for step in 1..=cfg.steps {
        let batch = sample_batch(
            tasks,
            &mut sampler,
            &mut rng,
            cfg.batch_size,
            cfg.mix_within_batch,
        );
        let loss = train_step(model, &mut opt, &batch, cfg.tune_mode, step)?;
        losses.push(loss);
        on_step(step, loss);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            let eval = evaluate(model, tasks, step, cfg.eval_limit)?;
            log::info!(
                "step {step}: average exact match {:.4}",
                eval.average.exact_match
            );
            record(&eval, &mut history);
        }
    }
    let final_eval = evaluate(model, tasks, cfg.steps, None)?;
    record(&final_eval, &mut history);
    Ok(TrainReport {
        history,
        best: best.into_iter().flatten().collect(),
        final_eval,
        losses,
    })
}

pub fn train(model: &mut Model, tasks: &TaskSet, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, tasks, cfg, |_, _| {})
}
