//! Hyper-prompt generation.
//!
//! Every task owns a global prompt `P_τ` (`l×d`). At each layer a local
//! hypernetwork, a bottleneck `U·relu(D·P)`, turns it into key and value
//! prompts of shape `l×h×d_h` that are prepended to the self-attention keys
//! and values. The three variants differ only in where `D` and `U` come from:
//!
//! * `share`: one set of local hypernetworks per layer, used by every task;
//! * `sep`: one set per (task, layer);
//! * `global`: generated per (task, layer) by global hypernetworks from a
//!   layer-aware task embedding `I = h_t(k_τ, z_m)`.
//!
//! All of this is rebuilt inside the training graph at every step, so
//! gradients reach prompts, hypernetworks and embeddings alike.

use crate::config::{ModelConfig, Stack, Variant};
use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamSpec};

/// Key and value prompts for one (task, layer), each `l×h×d_h`.
#[derive(Debug, Clone, Copy)]
pub struct PromptPair {
    pub key: Var,
    pub value: Var,
}

/// Bottleneck weights of one local hypernetwork pair.
#[derive(Debug, Clone, Copy)]
pub struct LocalHyperNet {
    /// `d×b`
    pub down_k: Var,
    /// `b×(h·d_h)`
    pub up_k: Var,
    pub down_v: Var,
    pub up_v: Var,
}

/// Task and layer embedding tables plus the projection MLP `h_t`.
#[derive(Debug, Clone, Copy)]
pub struct TaskLayerEmbeddings {
    /// `T×t'`
    pub task_emb: Var,
    /// `M×t'`
    pub layer_emb: Var,
    /// `2t'×e`
    pub w1: Var,
    pub b1: Option<Var>,
    /// `e×t`
    pub w2: Var,
    pub b2: Option<Var>,
}

/// Weights of the global hypernetworks `H_k` and `H_v`.
#[derive(Debug, Clone, Copy)]
pub struct GlobalHyperNet {
    /// `(d·b)×t`
    pub w_dk: Var,
    /// `(b·h·d_h)×t`
    pub w_uk: Var,
    pub w_dv: Var,
    pub w_uv: Var,
}

fn stack_prefix(stack: Stack) -> String {
    format!("cond/{}", stack.tag())
}

pub fn prompts_path(stack: Stack) -> String {
    format!("{}/prompts", stack_prefix(stack))
}

fn local_path(stack: Stack, layer: usize, task: Option<usize>, name: &str) -> String {
    match task {
        Some(t) => format!("{}/local/{layer}/task{t}/{name}", stack_prefix(stack)),
        None => format!("{}/local/{layer}/{name}", stack_prefix(stack)),
    }
}

fn global_path(stack: Stack, name: &str) -> String {
    format!("{}/{name}", stack_prefix(stack))
}

fn local_specs(
    cfg: &ModelConfig,
    stack: Stack,
    layer: usize,
    task: Option<usize>,
) -> Vec<ParamSpec> {
    let (d, b) = (cfg.d_model, cfg.bottleneck);
    let down = Init::Normal(1.0 / (d as f64).sqrt());
    let up = Init::Normal(0.02);
    vec![
        ParamSpec::new(local_path(stack, layer, task, "down_k"), &[d, b], down),
        ParamSpec::new(local_path(stack, layer, task, "up_k"), &[b, d], up),
        ParamSpec::new(local_path(stack, layer, task, "down_v"), &[d, b], down),
        ParamSpec::new(local_path(stack, layer, task, "up_v"), &[b, d], up),
    ]
}

/// Declares every hyper-prompt parameter of `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if !cfg.variant.is_hyper_prompt() {
        return specs;
    }
    let (d, b, tasks) = (cfg.d_model, cfg.bottleneck, cfg.num_tasks);
    for stack in cfg.conditioned_stacks() {
        let l = cfg.prompt_len_for(stack);
        let layers = cfg.layers(stack);
        specs.push(ParamSpec::new(
            prompts_path(stack),
            &[tasks, l, d],
            Init::Normal(0.02),
        ));
        match cfg.variant {
            Variant::Share => {
                for m in 0..layers {
                    specs.extend(local_specs(cfg, stack, m, None));
                }
            }
            Variant::Sep => {
                for m in 0..layers {
                    for t in 0..tasks {
                        specs.extend(local_specs(cfg, stack, m, Some(t)));
                    }
                }
            }
            Variant::Global => {
                let (tp, t, e) = (cfg.task_emb_dim, cfg.fused_emb_dim, cfg.proj_hidden);
                let w_down = Init::Normal(1.0 / ((d * t) as f64).sqrt());
                let w_up = Init::Normal(0.02 / (t as f64).powf(0.25));
                specs.push(ParamSpec::new(
                    global_path(stack, "task_emb"),
                    &[tasks, tp],
                    Init::Normal(1.0),
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "layer_emb"),
                    &[layers, tp],
                    Init::Normal(1.0),
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "proj/w1"),
                    &[2 * tp, e],
                    Init::Normal(1.0 / ((2 * tp) as f64).sqrt()),
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "proj/w2"),
                    &[e, t],
                    Init::Normal(1.0 / (e as f64).sqrt()),
                ));
                if cfg.task_proj_bias {
                    specs.push(ParamSpec::new(
                        global_path(stack, "proj/b1"),
                        &[e],
                        Init::Zeros,
                    ));
                    specs.push(ParamSpec::new(
                        global_path(stack, "proj/b2"),
                        &[t],
                        Init::Zeros,
                    ));
                }
                specs.push(ParamSpec::new(
                    global_path(stack, "hyper/w_dk"),
                    &[d * b, t],
                    w_down,
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "hyper/w_uk"),
                    &[b * d, t],
                    w_up,
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "hyper/w_dv"),
                    &[d * b, t],
                    w_down,
                ));
                specs.push(ParamSpec::new(
                    global_path(stack, "hyper/w_uv"),
                    &[b * d, t],
                    w_up,
                ));
            }
            _ => unreachable!("checked is_hyper_prompt"),
        }
    }
    specs
}

/// `I = W2·relu(W1·[k_τ; z_m] + b1) + b2`, a vector of length `t`.
pub fn layer_aware_embedding(
    g: &mut Graph,
    emb: &TaskLayerEmbeddings,
    task: usize,
    layer: usize,
) -> Result<Var> {
    let (tasks, tp) = (g.shape(emb.task_emb)[0], g.shape(emb.task_emb)[1]);
    let layers = g.shape(emb.layer_emb)[0];
    if task >= tasks {
        return Err(Error::Index(format!(
            "task {task} out of range for {tasks} tasks"
        )));
    }
    if layer >= layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range for {layers} layers"
        )));
    }
    if g.shape(emb.w1)[0] != 2 * tp {
        return Err(dim_err!(
            "task projection expects input width {}, embeddings give {}",
            g.shape(emb.w1)[0],
            2 * tp
        ));
    }
    let k = g.narrow(emb.task_emb, 0, task, 1)?;
    let z = g.narrow(emb.layer_emb, 0, layer, 1)?;
    let kz = g.concat(&[k, z], 1)?;
    let mut hidden = g.matmul(kz, emb.w1)?;
    if let Some(b1) = emb.b1 {
        hidden = g.add_bias(hidden, b1)?;
    }
    let hidden = g.relu(hidden);
    let mut out = g.matmul(hidden, emb.w2)?;
    if let Some(b2) = emb.b2 {
        out = g.add_bias(out, b2)?;
    }
    let t = g.shape(emb.w2)[1];
    g.reshape(out, &[t])
}

/// Contracts the global hypernetworks with `I` to produce one local
/// hypernetwork: `D = reshape(W_D·I, d×b)`, `U = reshape(W_U·I, b×d)`.
pub fn generate_local_hypernets(
    g: &mut Graph,
    ghn: &GlobalHyperNet,
    embedding: Var,
    d_model: usize,
    bottleneck: usize,
) -> Result<LocalHyperNet> {
    let t = g.shape(ghn.w_dk)[1];
    if g.shape(embedding) != [t] {
        return Err(dim_err!(
            "layer-aware embedding {:?} does not match hypernetwork input width {t}",
            g.shape(embedding)
        ));
    }
    let col = g.reshape(embedding, &[t, 1])?;
    let mut gen = |w: Var, shape: [usize; 2]| -> Result<Var> {
        if g.shape(w) != [shape[0] * shape[1], t] {
            return Err(dim_err!(
                "hypernetwork weight {:?} cannot generate a {:?} matrix",
                g.shape(w),
                shape
            ));
        }
        let flat = g.matmul(w, col)?;
        g.reshape(flat, &shape)
    };
    Ok(LocalHyperNet {
        down_k: gen(ghn.w_dk, [d_model, bottleneck])?,
        up_k: gen(ghn.w_uk, [bottleneck, d_model])?,
        down_v: gen(ghn.w_dv, [d_model, bottleneck])?,
        up_v: gen(ghn.w_uv, [bottleneck, d_model])?,
    })
}

/// `P_k = relu(P·D_k)·U_k` and `P_v = relu(P·D_v)·U_v`, reshaped to
/// `l×h×d_h`.
pub fn generate_hyper_prompts(
    g: &mut Graph,
    local: &LocalHyperNet,
    prompt: Var,
    num_heads: usize,
    head_dim: usize,
) -> Result<PromptPair> {
    let l = g.shape(prompt)[0];
    let mut project = |down: Var, up: Var| -> Result<Var> {
        let h = g.matmul(prompt, down)?;
        let h = g.relu(h);
        let p = g.matmul(h, up)?;
        if g.shape(p)[1] != num_heads * head_dim {
            return Err(dim_err!(
                "generated prompt width {} is not {num_heads}×{head_dim}",
                g.shape(p)[1]
            ));
        }
        g.reshape(p, &[l, num_heads, head_dim])
    };
    Ok(PromptPair {
        key: project(local.down_k, local.up_k)?,
        value: project(local.down_v, local.up_v)?,
    })
}

fn bind_local(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
    layer: usize,
    task: Option<usize>,
) -> Result<LocalHyperNet> {
    Ok(LocalHyperNet {
        down_k: binder.var(g, &local_path(stack, layer, task, "down_k"))?,
        up_k: binder.var(g, &local_path(stack, layer, task, "up_k"))?,
        down_v: binder.var(g, &local_path(stack, layer, task, "down_v"))?,
        up_v: binder.var(g, &local_path(stack, layer, task, "up_v"))?,
    })
}

pub fn bind_embeddings(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
) -> Result<TaskLayerEmbeddings> {
    let optional = |g: &mut Graph, binder: &mut Binder<'_>, name: &str| -> Result<Option<Var>> {
        let path = global_path(stack, name);
        if binder.store().contains(&path) {
            binder.var(g, &path).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(TaskLayerEmbeddings {
        task_emb: binder.var(g, &global_path(stack, "task_emb"))?,
        layer_emb: binder.var(g, &global_path(stack, "layer_emb"))?,
        w1: binder.var(g, &global_path(stack, "proj/w1"))?,
        b1: optional(g, binder, "proj/b1")?,
        w2: binder.var(g, &global_path(stack, "proj/w2"))?,
        b2: optional(g, binder, "proj/b2")?,
    })
}

pub fn bind_global_hypernet(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
) -> Result<GlobalHyperNet> {
    Ok(GlobalHyperNet {
        w_dk: binder.var(g, &global_path(stack, "hyper/w_dk"))?,
        w_uk: binder.var(g, &global_path(stack, "hyper/w_uk"))?,
        w_dv: binder.var(g, &global_path(stack, "hyper/w_dv"))?,
        w_uv: binder.var(g, &global_path(stack, "hyper/w_uv"))?,
    })
}

/// The global prompt of `task` in `stack`, as an `l×d` node.
pub fn task_prompt(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    stack: Stack,
    task: usize,
) -> Result<Var> {
    let table = binder.var(g, &prompts_path(stack))?;
    let shape = g.shape(table).to_vec();
    if task >= shape[0] {
        return Err(Error::Index(format!(
            "task {task} out of range for {} tasks",
            shape[0]
        )));
    }
    let row = g.narrow(table, 0, task, 1)?;
    g.reshape(row, &[shape[1], shape[2]])
}

/// Hyper-prompts for (`task`, `layer`) of `stack` under the configured
/// variant.
pub fn prompts_for(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    stack: Stack,
    task: usize,
    layer: usize,
) -> Result<PromptPair> {
    if !cfg.variant.is_hyper_prompt() {
        return Err(config_err!(
            "variant {} does not generate hyper-prompts",
            cfg.variant
        ));
    }
    if !cfg.placement.includes(stack) {
        return Err(config_err!(
            "placement {} has no hyper-prompts in the {:?} stack",
            cfg.placement.name(),
            stack
        ));
    }
    if task >= cfg.num_tasks {
        return Err(Error::Index(format!(
            "task {task} out of range for {} tasks",
            cfg.num_tasks
        )));
    }
    if layer >= cfg.layers(stack) {
        return Err(Error::Index(format!("layer {layer} out of range")));
    }
    let prompt = task_prompt(g, binder, stack, task)?;
    let local = match cfg.variant {
        Variant::Share => bind_local(g, binder, stack, layer, None)?,
        Variant::Sep => bind_local(g, binder, stack, layer, Some(task))?,
        Variant::Global => {
            let emb = bind_embeddings(g, binder, stack)?;
            let ghn = bind_global_hypernet(g, binder, stack)?;
            let i = layer_aware_embedding(g, &emb, task, layer)?;
            generate_local_hypernets(g, &ghn, i, cfg.d_model, cfg.bottleneck)?
        }
        _ => unreachable!("checked is_hyper_prompt"),
    };
    generate_hyper_prompts(g, &local, prompt, cfg.num_heads, cfg.head_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn embeddings(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        bias: bool,
        zero: bool,
    ) -> TaskLayerEmbeddings {
        let (tasks, layers, tp, e, tt) = (3, 2, 4, 5, 6);
        let w = |g: &mut Graph, rng: &mut ChaCha8Rng, s: &[usize]| {
            if zero {
                g.variable(Tensor::zeros(s))
            } else {
                g.variable(Tensor::randn(s, 1.0, rng))
            }
        };
        TaskLayerEmbeddings {
            task_emb: g.variable(Tensor::randn(&[tasks, tp], 1.0, rng)),
            layer_emb: g.variable(Tensor::randn(&[layers, tp], 1.0, rng)),
            w1: w(g, rng, &[2 * tp, e]),
            b1: bias.then(|| g.variable(Tensor::randn(&[e], 1.0, rng))),
            w2: w(g, rng, &[e, tt]),
            b2: bias.then(|| g.variable(Tensor::randn(&[tt], 1.0, rng))),
        }
    }

    #[test]
    fn zero_projection_weights_yield_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let emb = embeddings(&mut g, &mut rng, true, true);
        let b2 = g.value(emb.b2.unwrap()).to_vec();
        for task in 0..3 {
            for layer in 0..2 {
                let i = layer_aware_embedding(&mut g, &emb, task, layer).unwrap();
                assert_eq!(g.value(i), b2.as_slice());
                assert_eq!(g.shape(i), &[6]);
            }
        }
    }

    #[test]
    fn distinct_tasks_give_distinct_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let emb = embeddings(&mut g, &mut rng, false, false);
        let a = layer_aware_embedding(&mut g, &emb, 0, 1).unwrap();
        let b = layer_aware_embedding(&mut g, &emb, 2, 1).unwrap();
        assert_ne!(g.value(a), g.value(b));
        assert!(matches!(
            layer_aware_embedding(&mut g, &emb, 3, 0),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            layer_aware_embedding(&mut g, &emb, 0, 2),
            Err(Error::Index(_))
        ));
    }

    fn random_ghn(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        d: usize,
        b: usize,
        tt: usize,
    ) -> GlobalHyperNet {
        GlobalHyperNet {
            w_dk: g.variable(Tensor::randn(&[d * b, tt], 1.0, rng)),
            w_uk: g.variable(Tensor::randn(&[b * d, tt], 1.0, rng)),
            w_dv: g.variable(Tensor::randn(&[d * b, tt], 1.0, rng)),
            w_uv: g.variable(Tensor::randn(&[b * d, tt], 1.0, rng)),
        }
    }

    #[test]
    fn basis_vector_selects_first_column() {
        let (d, b, tt) = (4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let ghn = random_ghn(&mut g, &mut rng, d, b, tt);
        let e1 = g.constant(t(&[3], &[1.0, 0.0, 0.0]));
        let local = generate_local_hypernets(&mut g, &ghn, e1, d, b).unwrap();
        let w = g.value(ghn.w_dk).to_vec();
        let col: Vec<f64> = (0..d * b).map(|r| w[r * tt]).collect();
        assert_eq!(g.value(local.down_k), col.as_slice());
        assert_eq!(g.shape(local.down_k), &[d, b]);
        assert_eq!(g.shape(local.up_k), &[b, d]);

        let zero = g.constant(Tensor::zeros(&[3]));
        let local = generate_local_hypernets(&mut g, &ghn, zero, d, b).unwrap();
        for v in [local.down_k, local.up_k, local.down_v, local.up_v] {
            assert!(g.value(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn contraction_matches_triple_loop() {
        let (d, b, tt) = (6, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let ghn = random_ghn(&mut g, &mut rng, d, b, tt);
        let i = g.constant(Tensor::randn(&[tt], 1.0, &mut rng));
        let local = generate_local_hypernets(&mut g, &ghn, i, d, b).unwrap();
        let iv = g.value(i).to_vec();
        for (w, out, rows, cols) in [
            (ghn.w_dk, local.down_k, d, b),
            (ghn.w_uk, local.up_k, b, d),
            (ghn.w_dv, local.down_v, d, b),
            (ghn.w_uv, local.up_v, b, d),
        ] {
            let wv = g.value(w);
            let ov = g.value(out);
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for k in 0..tt {
                        acc += wv[(r * cols + c) * tt + k] * iv[k];
                    }
                    assert!((ov[r * cols + c] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hand_evaluated_hyper_prompt() {
        let mut g = Graph::new();
        let d = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let u = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let local = LocalHyperNet {
            down_k: d,
            up_k: u,
            down_v: d,
            up_v: u,
        };
        let p = g.constant(t(&[1, 2], &[1.0, -3.0]));
        let pair = generate_hyper_prompts(&mut g, &local, p, 1, 2).unwrap();
        assert_eq!(g.value(pair.key), &[0.0, 0.0]);
        assert_eq!(g.shape(pair.key), &[1, 1, 2]);

        let zero = g.constant(Tensor::zeros(&[3, 2]));
        let pair = generate_hyper_prompts(&mut g, &local, zero, 1, 2).unwrap();
        assert!(g.value(pair.value).iter().all(|&x| x == 0.0));
        assert_eq!(g.shape(pair.value), &[3, 1, 2]);
    }

    #[test]
    fn output_shape_is_l_by_heads_by_head_dim() {
        let (l, d, b, h, dh) = (3, 8, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let local = LocalHyperNet {
            down_k: g.constant(Tensor::randn(&[d, b], 1.0, &mut rng)),
            up_k: g.constant(Tensor::randn(&[b, h * dh], 1.0, &mut rng)),
            down_v: g.constant(Tensor::randn(&[d, b], 1.0, &mut rng)),
            up_v: g.constant(Tensor::randn(&[b, h * dh], 1.0, &mut rng)),
        };
        let p = g.constant(Tensor::randn(&[l, d], 1.0, &mut rng));
        let pair = generate_hyper_prompts(&mut g, &local, p, h, dh).unwrap();
        assert_eq!(g.shape(pair.key), &[l, h, dh]);
        assert_eq!(g.shape(pair.value), &[l, h, dh]);
        assert!(generate_hyper_prompts(&mut g, &local, p, 3, dh).is_err());
    }
}
