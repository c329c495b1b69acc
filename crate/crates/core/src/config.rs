//! Architecture hyperparameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// How task conditioning is added to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain multi-task backbone.
    None,
    /// Per-task prompts prepended to the encoder input embeddings.
    PromptTuning,
    /// Per-task bottleneck adapters after each feed-forward sublayer.
    Adapter,
    /// Hyper-prompts from local hypernetworks shared by all tasks.
    Share,
    /// Hyper-prompts from per-task local hypernetworks.
    Sep,
    /// Hyper-prompts from hypernetwork-generated local hypernetworks.
    Global,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::None,
        Variant::PromptTuning,
        Variant::Adapter,
        Variant::Share,
        Variant::Sep,
        Variant::Global,
    ];

    /// True for the variants that inject prompts into self-attention.
    pub fn is_hyper_prompt(self) -> bool {
        matches!(self, Variant::Share | Variant::Sep | Variant::Global)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::PromptTuning => "prompt_tuning",
            Variant::Adapter => "adapter",
            Variant::Share => "share",
            Variant::Sep => "sep",
            Variant::Global => "global",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which stacks receive hyper-prompts or adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Encoder,
    Decoder,
    Both,
}

impl Placement {
    pub fn includes(self, stack: Stack) -> bool {
        match self {
            Placement::Both => true,
            Placement::Encoder => stack == Stack::Encoder,
            Placement::Decoder => stack == Stack::Decoder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Encoder => "encoder",
            Placement::Decoder => "decoder",
            Placement::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub const BOTH: [Stack; 2] = [Stack::Encoder, Stack::Decoder];

    /// Short tag used in parameter paths.
    pub fn tag(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

/// All architecture hyperparameters of the encoder-decoder model and its
/// task conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width `d`.
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    /// Prompt length `l`, shared by both stacks unless overridden.
    pub prompt_len: usize,
    pub prompt_len_enc: Option<usize>,
    pub prompt_len_dec: Option<usize>,
    /// Local hypernetwork bottleneck `b`.
    pub bottleneck: usize,
    /// Raw task and layer embedding width `t'`.
    pub task_emb_dim: usize,
    /// Layer-aware task embedding width `t`.
    pub fused_emb_dim: usize,
    /// Hidden width `e` of the task projection MLP.
    pub proj_hidden: usize,
    pub num_tasks: usize,
    /// Bottleneck of the adapter baseline.
    pub adapter_dim: usize,
    /// Adds biases to the task projection MLP.
    pub task_proj_bias: bool,
    pub variant: Variant,
    pub placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            head_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            vocab_size: crate::data::Tokenizer::new().vocab_size(),
            max_enc_len: 12,
            max_dec_len: 10,
            prompt_len: 8,
            prompt_len_enc: None,
            prompt_len_dec: None,
            bottleneck: 16,
            task_emb_dim: 16,
            fused_emb_dim: 32,
            proj_hidden: 32,
            num_tasks: 5,
            adapter_dim: 16,
            task_proj_bias: false,
            variant: Variant::Global,
            placement: Placement::Both,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self, stack: Stack) -> usize {
        match stack {
            Stack::Encoder => self.enc_layers,
            Stack::Decoder => self.dec_layers,
        }
    }

    pub fn prompt_len_for(&self, stack: Stack) -> usize {
        let o = match stack {
            Stack::Encoder => self.prompt_len_enc,
            Stack::Decoder => self.prompt_len_dec,
        };
        o.unwrap_or(self.prompt_len)
    }

    /// Stacks that own conditioning parameters (hyper-prompts or adapters).
    pub fn conditioned_stacks(&self) -> Vec<Stack> {
        match self.variant {
            Variant::None | Variant::PromptTuning => vec![],
            _ => Stack::BOTH
                .into_iter()
                .filter(|&s| self.placement.includes(s))
                .collect(),
        }
    }

    /// Prompt length injected into self-attention of `stack`, 0 when the
    /// stack has no hyper-prompts.
    pub fn injected_prompt_len(&self, stack: Stack) -> usize {
        if self.variant.is_hyper_prompt() && self.placement.includes(stack) {
            self.prompt_len_for(stack)
        } else {
            0
        }
    }

    /// Number of prompt positions prepended to the encoder input.
    pub fn input_prompt_len(&self) -> usize {
        if self.variant == Variant::PromptTuning {
            self.prompt_len
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_enc_len", self.max_enc_len),
            ("max_dec_len", self.max_dec_len),
            ("num_tasks", self.num_tasks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("model.{name} must be positive"));
            }
        }
        if self.d_model != self.num_heads * self.head_dim {
            return Err(config_err!(
                "model.d_model ({}) must equal num_heads * head_dim ({} * {})",
                self.d_model,
                self.num_heads,
                self.head_dim
            ));
        }
        if self.variant.is_hyper_prompt()
            && (self.bottleneck == 0 || self.bottleneck > self.d_model)
        {
            return Err(config_err!(
                "model.bottleneck must be in 1..={}, got {}",
                self.d_model,
                self.bottleneck
            ));
        }
        if self.variant == Variant::Global {
            for (name, v) in [
                ("task_emb_dim", self.task_emb_dim),
                ("fused_emb_dim", self.fused_emb_dim),
                ("proj_hidden", self.proj_hidden),
            ] {
                if v == 0 {
                    return Err(config_err!(
                        "model.{name} must be positive for variant global"
                    ));
                }
            }
        }
        if self.variant == Variant::Adapter && self.adapter_dim == 0 {
            return Err(config_err!(
                "model.adapter_dim must be positive for variant adapter"
            ));
        }
        if self.variant == Variant::PromptTuning && self.prompt_len >= self.max_enc_len {
            return Err(config_err!(
                "model.prompt_len ({}) leaves no room for tokens within max_enc_len ({})",
                self.prompt_len,
                self.max_enc_len
            ));
        }
        Ok(())
    }
}
