#![allow(dead_code)]

use hyperprompt_core::data::{EOS, PAD};
use hyperprompt_core::*;

pub fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_heads: 2,
        head_dim: 4,
        enc_layers: 2,
        dec_layers: 2,
        ffn_dim: 12,
        vocab_size: 11,
        max_enc_len: 8,
        max_dec_len: 6,
        prompt_len: 3,
        bottleneck: 4,
        task_emb_dim: 5,
        fused_emb_dim: 6,
        proj_hidden: 7,
        num_tasks: 2,
        adapter_dim: 3,
        variant,
        ..ModelConfig::default()
    }
}

pub fn batch() -> Batch {
    Batch {
        enc: vec![vec![3, 4, 5, 6, EOS], vec![7, 8, EOS], vec![9, 3, 3, EOS]],
        dec_in: vec![vec![PAD, 9, 10, 3], vec![PAD, 5], vec![PAD, 4, 4]],
        targets: vec![vec![9, 10, 3, EOS], vec![5, EOS], vec![4, 4, EOS]],
        tasks: vec![0, 1, 0],
    }
}

/// Logits (flattened) of a frozen forward pass.
pub fn logits(model: &Model, b: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen(model.params());
    let pass = model.forward_batch(&mut g, &mut binder, b).unwrap();
    g.value(pass.logits).to_vec()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
