//! Toy T5-style encoder-decoder Transformer.
//!
//! Pre-norm residual blocks, learned absolute position embeddings for
//! tokens, bias-free projections, and a shared token embedding. Self-attention
//! in a conditioned stack prepends hyper-prompts to its keys and values; the
//! prompts carry no position and are visible to every query, including under
//! the decoder's causal mask. Cross-attention never receives prompts.

use crate::baselines::{self, distinct, select_per_example};
use crate::conditioning::{self, PromptPair};
use crate::config::{ModelConfig, Stack, Variant};
use crate::data::{Example, EOS, PAD};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Projection weights of one attention sublayer, each `d×d`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Output of an attention call together with its probabilities
/// (`[B·h, Lq, l+Lk]`, prompt columns first).
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Var,
}

/// Per-layer self-attention probabilities captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub stack: Stack,
    pub layer: usize,
    pub probs: Var,
    pub prompt_len: usize,
    pub query_len: usize,
    /// Validity of each token key position, `[B × key_len]`.
    pub key_valid: Vec<bool>,
    pub key_len: usize,
}

/// A padded batch of examples in teacher-forcing layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub enc: Vec<Vec<usize>>,
    pub dec_in: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub tasks: Vec<usize>,
}

impl Batch {
    /// Decoder input is the target shifted right behind the start token
    /// (`PAD`).
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut b = Batch {
            enc: vec![],
            dec_in: vec![],
            targets: vec![],
            tasks: vec![],
        };
        for ex in examples {
            let mut dec = vec![PAD];
            dec.extend(&ex.target_ids[..ex.target_ids.len().saturating_sub(1)]);
            b.enc.push(ex.input_ids.clone());
            b.dec_in.push(dec);
            b.targets.push(ex.target_ids.clone());
            b.tasks.push(ex.task);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Target ids flattened row-major with `PAD` filling, matching the logits
    /// layout of [`Model::forward_batch`].
    pub fn flat_targets(&self) -> Vec<usize> {
        let ld = self.dec_in.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = vec![PAD; self.len() * ld];
        for (b, t) in self.targets.iter().enumerate() {
            for (j, &id) in t.iter().take(ld).enumerate() {
                out[b * ld + j] = id;
            }
        }
        out
    }
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[B·L_dec, vocab]`
    pub logits: Var,
    pub dec_len: usize,
    pub traces: Vec<AttentionTrace>,
}

struct Encoded {
    out: Var,
    key_valid: Vec<bool>,
}

fn pad(seqs: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut flat = vec![PAD; seqs.len() * len];
    for (b, s) in seqs.iter().enumerate() {
        flat[b * len..b * len + s.len()].copy_from_slice(s);
    }
    (flat, len)
}

fn validity(seqs: &[Vec<usize>], len: usize, prefix: usize) -> Vec<bool> {
    let mut v = Vec::with_capacity(seqs.len() * (prefix + len));
    for s in seqs {
        v.extend(std::iter::repeat_n(true, prefix));
        v.extend((0..len).map(|j| j < s.len()));
    }
    v
}

/// Batched multi-head attention.
///
/// `q_in` is `[B·Lq, d]`, `kv_in` is `[B·Lk, d]`; `prompts`, when given, are
/// `[B, l, h, d_h]` key and value prompts. `key_valid` (`B×Lk`) masks padded
/// keys; `causal` masks token keys after the query position. Prompt columns
/// are never masked.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    layer: &AttentionLayer,
    q_in: Var,
    kv_in: Var,
    prompts: Option<(Var, Var)>,
    batch: usize,
    num_heads: usize,
    key_valid: &[bool],
    causal: bool,
) -> Result<AttentionOutput> {
    let d = g.shape(q_in)[1];
    if !d.is_multiple_of(num_heads) {
        return Err(dim_err!("width {d} is not divisible by {num_heads} heads"));
    }
    let dh = d / num_heads;
    let lq = g.shape(q_in)[0] / batch;
    let lk = g.shape(kv_in)[0] / batch;
    if key_valid.len() != batch * lk {
        return Err(dim_err!(
            "key mask of length {} for {batch}×{lk} keys",
            key_valid.len()
        ));
    }
    let lp = match prompts {
        Some((pk, pv)) => {
            let expect =
                |s: &[usize]| s.len() == 4 && s[0] == batch && s[2] == num_heads && s[3] == dh;
            if !expect(g.shape(pk)) || g.shape(pk) != g.shape(pv) {
                return Err(dim_err!(
                    "prompt shapes {:?}/{:?} do not match [{batch}, l, {num_heads}, {dh}]",
                    g.shape(pk),
                    g.shape(pv)
                ));
            }
            g.shape(pk)[1]
        }
        None => 0,
    };
    let keys = lp + lk;

    let q = g.matmul(q_in, layer.wq)?;
    let q = g.reshape(q, &[batch, lq, num_heads, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let q = g.reshape(q, &[batch * num_heads, lq, dh])?;

    let k = g.matmul(kv_in, layer.wk)?;
    let mut k = g.reshape(k, &[batch, lk, num_heads, dh])?;
    let v = g.matmul(kv_in, layer.wv)?;
    let mut v = g.reshape(v, &[batch, lk, num_heads, dh])?;
    if let Some((pk, pv)) = prompts {
        k = g.concat(&[pk, k], 1)?;
        v = g.concat(&[pv, v], 1)?;
    }
    // keys go straight to [B·h, d_h, K] so the score product needs no transpose
    let k = g.permute(k, &[0, 2, 3, 1])?;
    let k = g.reshape(k, &[batch * num_heads, dh, keys])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let v = g.reshape(v, &[batch * num_heads, keys, dh])?;

    let scores = g.matmul(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let mut mask = Vec::with_capacity(batch * num_heads * lq * keys);
    for b in 0..batch {
        let valid = &key_valid[b * lk..(b + 1) * lk];
        for _ in 0..num_heads {
            for i in 0..lq {
                mask.extend(std::iter::repeat_n(true, lp));
                mask.extend((0..lk).map(|j| valid[j] && (!causal || j <= i)));
            }
        }
    }
    let probs = g.masked_softmax(scores, &mask)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.reshape(ctx, &[batch, num_heads, lq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * lq, d])?;
    let output = g.matmul(ctx, layer.wo)?;
    Ok(AttentionOutput { output, probs })
}

/// Self-attention over one sequence `x` (`L×d`) with optional hyper-prompts
/// (`l×h×d_h` each). Probabilities come back as `[h, L, l+L]`.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    layer: &AttentionLayer,
    prompts: Option<&PromptPair>,
    causal: bool,
    num_heads: usize,
) -> Result<AttentionOutput> {
    let len = g.shape(x)[0];
    let batched = match prompts {
        Some(p) => {
            let s = g.shape(p.key).to_vec();
            if s.len() != 3 || g.shape(p.value) != s.as_slice() {
                return Err(dim_err!(
                    "prompt pair shapes {:?}/{:?} are not l×h×d_h",
                    s,
                    g.shape(p.value)
                ));
            }
            let shape = [1, s[0], s[1], s[2]];
            Some((g.reshape(p.key, &shape)?, g.reshape(p.value, &shape)?))
        }
        None => None,
    };
    multi_head_attention(
        g,
        layer,
        x,
        x,
        batched,
        1,
        num_heads,
        &vec![true; len],
        causal,
    )
}

fn layer_path(stack: Stack, layer: usize, name: &str) -> String {
    format!("backbone/{}/{layer}/{name}", stack.tag())
}

fn backbone_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
    // fan-in scaling for projections; embeddings at unit scale since every
    // block input passes through a norm
    let fan_in = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let w = fan_in(d);
    let emb = Init::Normal(1.0);
    let mut specs = vec![
        ParamSpec::new("backbone/embed", &[v, d], emb),
        ParamSpec::new("backbone/enc/pos", &[cfg.max_enc_len, d], emb),
        ParamSpec::new("backbone/dec/pos", &[cfg.max_dec_len, d], emb),
        ParamSpec::new("backbone/enc/ln_final", &[d], Init::Ones),
        ParamSpec::new("backbone/dec/ln_final", &[d], Init::Ones),
        ParamSpec::new("backbone/lm_head", &[d, v], w),
    ];
    for stack in Stack::BOTH {
        let attn_blocks: &[&str] = match stack {
            Stack::Encoder => &["attn"],
            Stack::Decoder => &["self", "cross"],
        };
        for m in 0..cfg.layers(stack) {
            for block in attn_blocks {
                specs.push(ParamSpec::new(
                    layer_path(stack, m, &format!("ln_{block}")),
                    &[d],
                    Init::Ones,
                ));
                for p in ["wq", "wk", "wv", "wo"] {
                    specs.push(ParamSpec::new(
                        layer_path(stack, m, &format!("{block}/{p}")),
                        &[d, d],
                        w,
                    ));
                }
            }
            specs.push(ParamSpec::new(
                layer_path(stack, m, "ln_ffn"),
                &[d],
                Init::Ones,
            ));
            specs.push(ParamSpec::new(layer_path(stack, m, "ffn/w1"), &[d, f], w));
            specs.push(ParamSpec::new(
                layer_path(stack, m, "ffn/w2"),
                &[f, d],
                fan_in(f),
            ));
        }
    }
    specs
}

/// Encoder-decoder model: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Every parameter the configuration calls for.
    pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = backbone_specs(cfg);
        specs.extend(conditioning::param_specs(cfg));
        specs.extend(baselines::param_specs(cfg));
        specs
    }

    /// Builds a model with freshly initialized parameters. Each parameter is
    /// drawn from a stream keyed by `(seed, path)`, so two configurations
    /// that share a backbone get bit-identical backbone weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in Self::param_specs(&config) {
            let t = spec.materialize(seed);
            params.insert(spec.path, t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking that they match `config`
    /// exactly. The error names the first offending parameter.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = Self::param_specs(&config);
        for spec in &specs {
            let t = params
                .get(&spec.path)
                .map_err(|_| Error::Load(format!("missing parameter {}", spec.path)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter {} has shape {:?}, configuration expects {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .iter()
                .map(|(p, _)| p)
                .find(|p| !specs.iter().any(|s| s.path == *p))
                .unwrap_or_default()
                .to_string();
            return Err(Error::Load(format!(
                "parameter {extra} is not part of the configured model"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn attention_layer(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stack: Stack,
        layer: usize,
        block: &str,
    ) -> Result<AttentionLayer> {
        let mut get = |p: &str| binder.var(g, &layer_path(stack, layer, &format!("{block}/{p}")));
        Ok(AttentionLayer {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }

    fn norm(&self, g: &mut Graph, binder: &mut Binder<'_>, x: Var, path: &str) -> Result<Var> {
        let gain = binder.var(g, path)?;
        g.layer_norm(x, gain)
    }

    fn ffn(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stack: Stack,
        layer: usize,
        x: Var,
        tasks: &[usize],
    ) -> Result<Var> {
        let w1 = binder.var(g, &layer_path(stack, layer, "ffn/w1"))?;
        let w2 = binder.var(g, &layer_path(stack, layer, "ffn/w2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.relu(h);
        let mut out = g.matmul(h, w2)?;
        if self.config.variant == Variant::Adapter && self.config.placement.includes(stack) {
            // the adapter acts on the sublayer output, inside the residual
            out = baselines::adapter_apply_batch(g, binder, stack, out, tasks, layer)?;
        }
        Ok(out)
    }

    /// Hyper-prompts for every example of the batch at (`stack`, `layer`),
    /// or `None` when the stack injects none.
    fn stack_prompts(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stack: Stack,
        layer: usize,
        tasks: &[usize],
    ) -> Result<Option<(Var, Var)>> {
        if self.config.injected_prompt_len(stack) == 0 {
            return Ok(None);
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for t in distinct(tasks) {
            let pair = conditioning::prompts_for(g, binder, &self.config, stack, t, layer)?;
            keys.push((t, pair.key));
            values.push((t, pair.value));
        }
        Ok(Some((
            select_per_example(g, &keys, tasks)?,
            select_per_example(g, &values, tasks)?,
        )))
    }

    fn check_inputs(&self, seqs: &[Vec<usize>], max: usize, what: &str) -> Result<()> {
        for s in seqs {
            if s.is_empty() {
                return Err(dim_err!("{what} sequence is empty"));
            }
            if s.len() > max {
                return Err(dim_err!(
                    "{what} sequence of length {} exceeds {max}",
                    s.len()
                ));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::Index(format!(
                    "{what} token {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        stack: Stack,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let table = binder.var(g, "backbone/embed")?;
        let tok = g.gather(table, ids)?;
        let pos_table = binder.var(g, &format!("backbone/{}/pos", stack.tag()))?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        g.add(tok, pos)
    }

    fn encode(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        enc: &[Vec<usize>],
        tasks: &[usize],
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        let batch = tasks.len();
        let (ids, le) = pad(enc);
        let d = cfg.d_model;
        let mut x = self.embed(g, binder, Stack::Encoder, &ids, batch, le)?;
        let lp_in = cfg.input_prompt_len();
        if cfg.variant == Variant::PromptTuning {
            let x3 = g.reshape(x, &[batch, le, d])?;
            let x3 = baselines::prepend_input_prompts_batch(g, binder, cfg, x3, tasks)?;
            x = g.reshape(x3, &[batch * (lp_in + le), d])?;
        }
        let len = lp_in + le;
        let key_valid = validity(enc, le, lp_in);
        for m in 0..cfg.enc_layers {
            let prompts = self.stack_prompts(g, binder, Stack::Encoder, m, tasks)?;
            let attn = self.attention_layer(g, binder, Stack::Encoder, m, "attn")?;
            let h = self.norm(g, binder, x, &layer_path(Stack::Encoder, m, "ln_attn"))?;
            let a = multi_head_attention(
                g,
                &attn,
                h,
                h,
                prompts,
                batch,
                cfg.num_heads,
                &key_valid,
                false,
            )?;
            traces.push(AttentionTrace {
                stack: Stack::Encoder,
                layer: m,
                probs: a.probs,
                prompt_len: cfg.injected_prompt_len(Stack::Encoder),
                query_len: len,
                key_valid: key_valid.clone(),
                key_len: len,
            });
            x = g.add(x, a.output)?;
            let h = self.norm(g, binder, x, &layer_path(Stack::Encoder, m, "ln_ffn"))?;
            let f = self.ffn(g, binder, Stack::Encoder, m, h, tasks)?;
            x = g.add(x, f)?;
        }
        let out = self.norm(g, binder, x, "backbone/enc/ln_final")?;
        Ok(Encoded { out, key_valid })
    }

    fn decode(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        encoded: &Encoded,
        dec_in: &[Vec<usize>],
        tasks: &[usize],
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<(Var, usize)> {
        let cfg = &self.config;
        let batch = tasks.len();
        let (ids, ld) = pad(dec_in);
        let mut x = self.embed(g, binder, Stack::Decoder, &ids, batch, ld)?;
        let self_valid = validity(dec_in, ld, 0);
        for m in 0..cfg.dec_layers {
            let prompts = self.stack_prompts(g, binder, Stack::Decoder, m, tasks)?;
            let attn = self.attention_layer(g, binder, Stack::Decoder, m, "self")?;
            let h = self.norm(g, binder, x, &layer_path(Stack::Decoder, m, "ln_self"))?;
            let a = multi_head_attention(
                g,
                &attn,
                h,
                h,
                prompts,
                batch,
                cfg.num_heads,
                &self_valid,
                true,
            )?;
            traces.push(AttentionTrace {
                stack: Stack::Decoder,
                layer: m,
                probs: a.probs,
                prompt_len: cfg.injected_prompt_len(Stack::Decoder),
                query_len: ld,
                key_valid: self_valid.clone(),
                key_len: ld,
            });
            x = g.add(x, a.output)?;

            let cross = self.attention_layer(g, binder, Stack::Decoder, m, "cross")?;
            let h = self.norm(g, binder, x, &layer_path(Stack::Decoder, m, "ln_cross"))?;
            let c = multi_head_attention(
                g,
                &cross,
                h,
                encoded.out,
                None,
                batch,
                cfg.num_heads,
                &encoded.key_valid,
                false,
            )?;
            x = g.add(x, c.output)?;

            let h = self.norm(g, binder, x, &layer_path(Stack::Decoder, m, "ln_ffn"))?;
            let f = self.ffn(g, binder, Stack::Decoder, m, h, tasks)?;
            x = g.add(x, f)?;
        }
        let out = self.norm(g, binder, x, "backbone/dec/ln_final")?;
        let head = binder.var(g, "backbone/lm_head")?;
        Ok((g.matmul(out, head)?, ld))
    }

    fn check_tasks(&self, tasks: &[usize]) -> Result<()> {
        match tasks.iter().find(|&&t| t >= self.config.num_tasks) {
            Some(t) => Err(Error::Index(format!(
                "task {t} out of range for {} tasks",
                self.config.num_tasks
            ))),
            None => Ok(()),
        }
    }

    /// Builds the forward graph for a batch; logits are `[B·L_dec, vocab]`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        batch: &Batch,
    ) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        self.check_tasks(&batch.tasks)?;
        self.check_inputs(&batch.enc, self.config.max_enc_len, "encoder")?;
        self.check_inputs(&batch.dec_in, self.config.max_dec_len, "decoder")?;
        let mut traces = Vec::new();
        let encoded = self.encode(g, binder, &batch.enc, &batch.tasks, &mut traces)?;
        let (logits, dec_len) = self.decode(
            g,
            binder,
            &encoded,
            &batch.dec_in,
            &batch.tasks,
            &mut traces,
        )?;
        Ok(ForwardPass {
            logits,
            dec_len,
            traces,
        })
    }

    /// Teacher-forced mean cross-entropy over target tokens (pad ignored).
    pub fn loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        batch: &Batch,
    ) -> Result<(Var, ForwardPass)> {
        let pass = self.forward_batch(g, binder, batch)?;
        let targets = batch.flat_targets();
        let loss = g.cross_entropy(pass.logits, &targets, PAD)?;
        Ok((loss, pass))
    }

    /// Logits `[L_dec × vocab]` for one example.
    pub fn forward(
        &self,
        enc_tokens: &[usize],
        dec_tokens: &[usize],
        task: usize,
    ) -> Result<Tensor> {
        let batch = Batch {
            enc: vec![enc_tokens.to_vec()],
            dec_in: vec![dec_tokens.to_vec()],
            targets: vec![vec![]],
            tasks: vec![task],
        };
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&self.params);
        let pass = self.forward_batch(&mut g, &mut binder, &batch)?;
        g.tensor(pass.logits)
            .reshape(vec![dec_tokens.len(), self.config.vocab_size])
    }

    /// Greedy decoding of several inputs at once. Each output stops before
    /// the first eos and holds at most `max_len` tokens; ties in the argmax go
    /// to the lowest id.
    pub fn greedy_decode_batch(
        &self,
        inputs: &[(&[usize], usize)],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if inputs.is_empty() {
            return Ok(vec![]);
        }
        let max_len = max_len.min(self.config.max_dec_len);
        let enc: Vec<Vec<usize>> = inputs.iter().map(|(s, _)| s.to_vec()).collect();
        let tasks: Vec<usize> = inputs.iter().map(|&(_, t)| t).collect();
        self.check_tasks(&tasks)?;
        self.check_inputs(&enc, self.config.max_enc_len, "encoder")?;
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&self.params);
        let mut traces = Vec::new();
        let encoded = self.encode(&mut g, &mut binder, &enc, &tasks, &mut traces)?;

        let v = self.config.vocab_size;
        let mut dec: Vec<Vec<usize>> = vec![vec![PAD]; inputs.len()];
        let mut out: Vec<Vec<usize>> = vec![vec![]; inputs.len()];
        let mut done = vec![false; inputs.len()];
        for step in 0..max_len {
            let (logits, ld) =
                self.decode(&mut g, &mut binder, &encoded, &dec, &tasks, &mut traces)?;
            let lv = g.value(logits);
            for b in 0..inputs.len() {
                let row = &lv[(b * ld + step) * v..(b * ld + step + 1) * v];
                let mut best = 0;
                for (id, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = id;
                    }
                }
                if !done[b] {
                    if best == EOS {
                        done[b] = true;
                    } else {
                        out[b].push(best);
                    }
                }
                dec[b].push(best);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn greedy_decode(
        &self,
        enc_tokens: &[usize],
        task: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[(enc_tokens, task)], max_len)?
            .pop()
            .expect("one input"))
    }
}
