//! Parameter counts and forward-operation estimates.
//!
//! Symbols follow the usual hyper-prompt notation: width `d`, prompt length
//! `l`, tasks `T`, bottleneck `b`, layer-aware embedding width `t`, raw
//! task/layer embedding width `t'`, layers `M`, projection hidden width `e`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Stack, Variant};
use crate::model::Model;
use crate::params::{is_backbone, is_conditioned};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone_count: usize,
    pub conditioned_count: usize,
    /// `1 + conditioned / backbone`.
    pub ratio: f64,
    /// The ratio rounded to two decimals, e.g. `"1.04x"`.
    pub ratio_display: String,
    /// Element count of every task-conditioned tensor, by path.
    pub breakdown: BTreeMap<String, usize>,
}

pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.2}x")
}

/// Closed-form count of task-conditioned parameters.
///
/// Per conditioned stack, global: `dlT + 4bdt + Tt' + Mt' + (2t'+t)e`
/// (plus `e + t` with projection biases); share: `dlT + 4bdM`;
/// sep: `dlT + 4bdMT`; adapters: `2dTMb_a`. Prompt tuning adds `Tld` once.
pub fn count_formula(cfg: &ModelConfig) -> usize {
    let (d, b, tasks) = (cfg.d_model, cfg.bottleneck, cfg.num_tasks);
    let (tp, t, e) = (cfg.task_emb_dim, cfg.fused_emb_dim, cfg.proj_hidden);
    match cfg.variant {
        Variant::None => 0,
        Variant::PromptTuning => tasks * cfg.prompt_len * d,
        _ => cfg
            .conditioned_stacks()
            .into_iter()
            .map(|s| {
                let (l, m) = (cfg.prompt_len_for(s), cfg.layers(s));
                match cfg.variant {
                    Variant::Share => d * l * tasks + 4 * b * d * m,
                    Variant::Sep => d * l * tasks + 4 * b * d * m * tasks,
                    Variant::Global => {
                        let bias = if cfg.task_proj_bias { e + t } else { 0 };
                        d * l * tasks
                            + 4 * b * d * t
                            + tasks * tp
                            + m * tp
                            + (2 * tp + t) * e
                            + bias
                    }
                    Variant::Adapter => 2 * d * cfg.adapter_dim * tasks * m,
                    Variant::None | Variant::PromptTuning => unreachable!(),
                }
            })
            .sum(),
    }
}

/// Counts by walking every allocated tensor, classified by path prefix.
pub fn count_enumerated(model: &Model) -> ParamReport {
    let params = model.params();
    let backbone_count = params.numel_where(is_backbone);
    let breakdown: BTreeMap<String, usize> = params
        .iter()
        .filter(|(p, _)| is_conditioned(p))
        .map(|(p, t)| (p.to_string(), t.numel()))
        .collect();
    let conditioned_count = breakdown.values().sum();
    let ratio = if backbone_count == 0 {
        1.0
    } else {
        1.0 + conditioned_count as f64 / backbone_count as f64
    };
    ParamReport {
        backbone_count,
        conditioned_count,
        ratio,
        ratio_display: format_ratio(ratio),
        breakdown,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpsReport {
    pub forward_ops: u64,
    /// Contributions of the encoder, decoder, output head and prompt
    /// generation.
    pub breakdown: BTreeMap<String, u64>,
}

/// `2mkn` for an `m×k` by `k×n` product.
pub fn matmul_ops(m: usize, k: usize, n: usize) -> u64 {
    2 * m as u64 * k as u64 * n as u64
}

struct Dims {
    d: usize,
    h: usize,
    dh: usize,
    f: usize,
}

fn self_attention_ops(x: &Dims, len: usize, prompt: usize) -> u64 {
    4 * matmul_ops(len, x.d, x.d)
        + x.h as u64 * (matmul_ops(len, x.dh, prompt + len) + matmul_ops(len, prompt + len, x.dh))
}

fn ffn_ops(cfg: &ModelConfig, x: &Dims, stack: Stack, len: usize) -> u64 {
    let mut ops = matmul_ops(len, x.d, x.f) + matmul_ops(len, x.f, x.d);
    if cfg.variant == Variant::Adapter && cfg.placement.includes(stack) {
        ops += matmul_ops(len, x.d, cfg.adapter_dim) + matmul_ops(len, cfg.adapter_dim, x.d);
    }
    ops
}

/// Cost of producing one layer's key and value prompts for one task.
fn prompt_generation_ops(cfg: &ModelConfig, l: usize) -> u64 {
    let (d, b) = (cfg.d_model, cfg.bottleneck);
    let local = 2 * (matmul_ops(l, d, b) + matmul_ops(l, b, d));
    match cfg.variant {
        Variant::Global => {
            let (tp, t, e) = (cfg.task_emb_dim, cfg.fused_emb_dim, cfg.proj_hidden);
            let embed = matmul_ops(1, 2 * tp, e) + matmul_ops(1, e, t);
            local + embed + 4 * matmul_ops(1, t, d * b)
        }
        _ => local,
    }
}

/// Dense-product operations of one forward pass over a single example with
/// `enc_len` encoder and `dec_len` decoder tokens. Softmax, norms and
/// lookups are not counted. The estimate does not depend on the number of
/// tasks.
pub fn estimate_forward_ops(cfg: &ModelConfig, enc_len: usize, dec_len: usize) -> OpsReport {
    let x = Dims {
        d: cfg.d_model,
        h: cfg.num_heads,
        dh: cfg.head_dim,
        f: cfg.ffn_dim,
    };
    let le = enc_len + cfg.input_prompt_len();
    let (lp_enc, lp_dec) = (
        cfg.injected_prompt_len(Stack::Encoder),
        cfg.injected_prompt_len(Stack::Decoder),
    );
    let mut encoder = 0;
    for _ in 0..cfg.enc_layers {
        encoder += self_attention_ops(&x, le, lp_enc) + ffn_ops(cfg, &x, Stack::Encoder, le);
    }
    let mut decoder = 0;
    for _ in 0..cfg.dec_layers {
        let cross = 2 * matmul_ops(dec_len, x.d, x.d)
            + 2 * matmul_ops(le, x.d, x.d)
            + x.h as u64 * (matmul_ops(dec_len, x.dh, le) + matmul_ops(dec_len, le, x.dh));
        decoder += self_attention_ops(&x, dec_len, lp_dec)
            + cross
            + ffn_ops(cfg, &x, Stack::Decoder, dec_len);
    }
    let head = matmul_ops(dec_len, x.d, cfg.vocab_size);
    let mut generation = 0;
    for stack in Stack::BOTH {
        let l = cfg.injected_prompt_len(stack);
        if l > 0 {
            generation += cfg.layers(stack) as u64 * prompt_generation_ops(cfg, l);
        }
    }
    let breakdown = BTreeMap::from([
        ("encoder".to_string(), encoder),
        ("decoder".to_string(), decoder),
        ("lm_head".to_string(), head),
        ("prompt_generation".to_string(), generation),
    ]);
    OpsReport {
        forward_ops: breakdown.values().sum(),
        breakdown,
    }
}

/// Adapter bottleneck whose conditioned-parameter count is closest to that
/// of `target` (same placement, layers and task count); ties go to the
/// smaller bottleneck.
pub fn matched_adapter_dim(target: &ModelConfig) -> usize {
    let goal = count_formula(target);
    let mut cfg = ModelConfig {
        variant: Variant::Adapter,
        adapter_dim: 1,
        ..target.clone()
    };
    let per_unit = count_formula(&cfg).max(1);
    let lo = (goal / per_unit).max(1);
    let mut best = lo;
    let mut best_gap = usize::MAX;
    for a in lo..=lo + 1 {
        cfg.adapter_dim = a;
        let gap = count_formula(&cfg).abs_diff(goal);
        if gap < best_gap {
            best = a;
            best_gap = gap;
        }
    }
    best
}
