//! Comparison systems: multi-task prompt tuning (per-task prompts prepended
//! to the encoder input embeddings) and vanilla adapters (per-task
//! dense-relu-dense bottlenecks with a residual, after each feed-forward
//! sublayer).

use crate::config::{ModelConfig, Stack, Variant};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamSpec};

pub const INPUT_PROMPTS_PATH: &str = "baseline/input_prompts";

fn adapter_path(stack: Stack, layer: usize, task: usize, name: &str) -> String {
    format!("baseline/adapter/{}/{layer}/task{task}/{name}", stack.tag())
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    match cfg.variant {
        Variant::PromptTuning => vec![ParamSpec::new(
            INPUT_PROMPTS_PATH,
            &[cfg.num_tasks, cfg.prompt_len, d],
            Init::Normal(0.02),
        )],
        Variant::Adapter => {
            let mut specs = Vec::new();
            for stack in cfg.conditioned_stacks() {
                for m in 0..cfg.layers(stack) {
                    for t in 0..cfg.num_tasks {
                        specs.push(ParamSpec::new(
                            adapter_path(stack, m, t, "down"),
                            &[d, cfg.adapter_dim],
                            Init::Normal(1.0 / (d as f64).sqrt()),
                        ));
                        // zero up-projection: every adapter starts as the identity
                        specs.push(ParamSpec::new(
                            adapter_path(stack, m, t, "up"),
                            &[cfg.adapter_dim, d],
                            Init::Zeros,
                        ));
                    }
                }
            }
            specs
        }
        _ => vec![],
    }
}

/// Stacks one node per example, chosen by task, into a `[B, ...]` node.
pub(crate) fn select_per_example(
    g: &mut Graph,
    per_task: &[(usize, Var)],
    tasks: &[usize],
) -> Result<Var> {
    let inner = g.shape(per_task[0].1).to_vec();
    let mut with_batch = vec![1];
    with_batch.extend(&inner);
    let mut rows = Vec::with_capacity(per_task.len());
    for &(_, v) in per_task {
        rows.push(g.reshape(v, &with_batch)?);
    }
    let table = g.concat(&rows, 0)?;
    let slots = tasks
        .iter()
        .map(|t| {
            per_task
                .iter()
                .position(|(task, _)| task == t)
                .ok_or_else(|| Error::Index(format!("no node for task {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    g.gather(table, &slots)
}

/// Distinct tasks in first-seen order.
pub(crate) fn distinct(tasks: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for &t in tasks {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Prepends `P_in[task]` to each example of `emb` (`[B, L, d]`), giving
/// `[B, l+L, d]`. Fails when `l+L` exceeds the configured encoder length.
pub fn prepend_input_prompts_batch(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    emb: Var,
    tasks: &[usize],
) -> Result<Var> {
    let shape = g.shape(emb).to_vec();
    let l = cfg.input_prompt_len();
    if shape.len() != 3 || shape[0] != tasks.len() {
        return Err(dim_err!(
            "input embeddings {:?} do not match {} tasks",
            shape,
            tasks.len()
        ));
    }
    if l + shape[1] > cfg.max_enc_len {
        return Err(dim_err!(
            "{l} input prompts plus {} tokens exceed max_enc_len {}",
            shape[1],
            cfg.max_enc_len
        ));
    }
    if l == 0 {
        return Ok(emb);
    }
    let table = binder.var(g, INPUT_PROMPTS_PATH)?;
    if let Some(&bad) = tasks.iter().find(|&&t| t >= cfg.num_tasks) {
        return Err(Error::Index(format!("task {bad} out of range")));
    }
    let prompts = g.gather(table, tasks)?;
    g.concat(&[prompts, emb], 1)
}

/// Single-example form of [`prepend_input_prompts_batch`]: `[L, d]` to
/// `[l+L, d]`.
pub fn prepend_input_prompts(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    emb: Var,
    task: usize,
) -> Result<Var> {
    let shape = g.shape(emb).to_vec();
    let batched = g.reshape(emb, &[1, shape[0], shape[1]])?;
    let out = prepend_input_prompts_batch(g, binder, cfg, batched, &[task])?;
    let rows = g.shape(out)[1];
    g.reshape(out, &[rows, shape[1]])
}

fn bottleneck(g: &mut Graph, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = g.matmul(x, down)?;
    let h = g.relu(h);
    g.matmul(h, up)
}

/// `x + up(relu(down(x)))` with the weights of `task` at `layer`.
/// `x` is `[rows, d]`.
pub fn adapter_apply(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
    x: Var,
    task: usize,
    layer: usize,
) -> Result<Var> {
    let down = binder.var(g, &adapter_path(stack, layer, task, "down"))?;
    let up = binder.var(g, &adapter_path(stack, layer, task, "up"))?;
    let delta = bottleneck(g, x, down, up)?;
    g.add(x, delta)
}

/// Adapter over a batch `x` of shape `[B·L, d]` where example `b` uses the
/// weights of `tasks[b]`.
pub fn adapter_apply_batch(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
    x: Var,
    tasks: &[usize],
    layer: usize,
) -> Result<Var> {
    let kinds = distinct(tasks);
    if kinds.len() == 1 {
        return adapter_apply(g, binder, stack, x, kinds[0], layer);
    }
    let shape = g.shape(x).to_vec();
    let (b, d) = (tasks.len(), shape[1]);
    let seq = shape[0] / b;
    let mut downs = Vec::new();
    let mut ups = Vec::new();
    for &t in &kinds {
        downs.push((t, binder.var(g, &adapter_path(stack, layer, t, "down"))?));
        ups.push((t, binder.var(g, &adapter_path(stack, layer, t, "up"))?));
    }
    let down = select_per_example(g, &downs, tasks)?;
    let up = select_per_example(g, &ups, tasks)?;
    let x3 = g.reshape(x, &[b, seq, d])?;
    let delta = bottleneck(g, x3, down, up)?;
    let delta = g.reshape(delta, &[b * seq, d])?;
    g.add(x, delta)
}
