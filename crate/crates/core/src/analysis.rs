//! Attention instrumentation: how much attention queries spend on
//! hyper-prompts, and how peaked their attention over real tokens is once
//! the prompts are removed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Stack;
use crate::data::Example;
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::model::{Batch, ForwardPass, Model};
use crate::params::Binder;

pub const HISTOGRAM_BINS: usize = 40;
const ROW_SUM_TOL: f64 = 1e-9;

/// One head's self-attention matrix for one example and layer. `scores` is
/// `Q×(l+L)` with the `prompt_len` prompt columns first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    pub example: usize,
    pub prompt_len: usize,
    pub scores: Vec<Vec<f64>>,
    pub valid_query_mask: Vec<bool>,
    /// Validity of the `L` token key columns.
    pub valid_key_mask: Vec<bool>,
}

impl AttentionRecord {
    /// Checks shapes and that every valid row is a distribution.
    pub fn validate(&self) -> Result<()> {
        let width = self.prompt_len + self.valid_key_mask.len();
        if self.scores.len() != self.valid_query_mask.len() {
            return Err(Error::Dimension(format!(
                "{} score rows for {} query flags",
                self.scores.len(),
                self.valid_query_mask.len()
            )));
        }
        for (i, row) in self.valid_rows() {
            if row.len() != width {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {width}",
                    row.len()
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonFinite(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    fn valid_rows(&self) -> impl Iterator<Item = (usize, &Vec<f64>)> {
        self.scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| self.valid_query_mask[i])
    }

    /// Prompt mass of every valid query row.
    pub fn row_prompt_mass(&self) -> Vec<f64> {
        self.valid_rows()
            .map(|(_, r)| r[..self.prompt_len].iter().sum())
            .collect()
    }

    /// Entropy (nats) of every valid row after dropping the prompt columns
    /// and renormalizing over valid token keys. Rows with no token mass left
    /// get entropy 0.
    pub fn row_token_entropy(&self) -> Vec<f64> {
        self.valid_rows()
            .map(|(_, r)| renormalized_entropy(&r[self.prompt_len..], &self.valid_key_mask))
            .collect()
    }
}

/// Shannon entropy of `p` restricted to `valid` entries and renormalized,
/// with `0·ln 0 = 0`.
pub fn renormalized_entropy(p: &[f64], valid: &[bool]) -> f64 {
    let mass: f64 = p
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(x, _)| x)
        .sum();
    if mass <= 0.0 {
        return 0.0;
    }
    -p.iter()
        .zip(valid)
        .filter(|&(&x, &v)| v && x > 0.0)
        .map(|(&x, _)| {
            let q = x / mass;
            q * q.ln()
        })
        .sum::<f64>()
}

/// Mean prompt mass over valid query rows, averaged over records (heads and
/// examples). Records must share stack, layer and prompt length; zero when
/// there are no prompts.
pub fn attention_mass(records: &[AttentionRecord]) -> Result<f64> {
    let Some(first) = records.first() else {
        return Ok(0.0);
    };
    if let Some(r) = records
        .iter()
        .find(|r| (r.stack, r.layer, r.prompt_len) != (first.stack, first.layer, first.prompt_len))
    {
        return Err(config_err!(
            "attention records mix layers or prompt lengths ({}/{} l={} vs {}/{} l={})",
            first.stack.tag(),
            first.layer,
            first.prompt_len,
            r.stack.tag(),
            r.layer,
            r.prompt_len
        ));
    }
    if first.prompt_len == 0 {
        return Ok(0.0);
    }
    let per_record: Vec<f64> = records
        .iter()
        .map(|r| {
            let rows = r.row_prompt_mass();
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().sum::<f64>() / rows.len() as f64
            }
        })
        .collect();
    Ok(per_record.iter().sum::<f64>() / per_record.len() as f64)
}

/// One entropy per (example, layer, valid query row): each head's
/// renormalized token entropy, averaged over heads. Ordered by example,
/// stack, layer, row.
pub fn token_entropy_distribution(records: &[AttentionRecord]) -> Vec<f64> {
    let mut groups: BTreeMap<(usize, Stack, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.example, r.stack, r.layer))
            .or_default()
            .push(r.row_token_entropy());
    }
    let mut out = Vec::new();
    for heads in groups.values() {
        let rows = heads[0].len();
        for i in 0..rows {
            out.push(heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[0, upper]`; values at or beyond `upper` land in the
/// last bin.
pub fn histogram(values: &[f64], bins: usize, upper: f64) -> Histogram {
    let width = if upper > 0.0 {
        upper / bins as f64
    } else {
        1.0
    };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v / width).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram {
        bins: edges,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    /// Labels (`"enc/0"`, ...) matching `per_layer_mass`.
    pub layers: Vec<String>,
    pub per_layer_mass: Vec<f64>,
    pub entropy_histogram: Histogram,
    pub n_examples: usize,
    pub entropies: Vec<f64>,
}

/// Aggregates records into the report; the histogram spans `[0, ln L]` for
/// the longest token key row.
pub fn report(records: &[AttentionRecord]) -> Result<AnalysisReport> {
    let mut by_layer: BTreeMap<(Stack, usize), Vec<AttentionRecord>> = BTreeMap::new();
    for r in records {
        by_layer
            .entry((r.stack, r.layer))
            .or_default()
            .push(r.clone());
    }
    let mut layers = Vec::new();
    let mut per_layer_mass = Vec::new();
    for ((stack, layer), recs) in &by_layer {
        layers.push(format!("{}/{layer}", stack.tag()));
        per_layer_mass.push(attention_mass(recs)?);
    }
    let entropies = token_entropy_distribution(records);
    let max_keys = records
        .iter()
        .map(|r| r.valid_key_mask.iter().filter(|&&v| v).count())
        .max()
        .unwrap_or(1)
        .max(1);
    let mut examples: Vec<usize> = records.iter().map(|r| r.example).collect();
    examples.sort_unstable();
    examples.dedup();
    Ok(AnalysisReport {
        layers,
        per_layer_mass,
        entropy_histogram: histogram(&entropies, HISTOGRAM_BINS, (max_keys as f64).ln()),
        n_examples: examples.len(),
        entropies,
    })
}

/// Splits captured self-attention of `stacks` into per-head records;
/// examples are numbered from `first_example`.
pub fn records_from_pass(
    g: &Graph,
    pass: &ForwardPass,
    stacks: &[Stack],
    num_heads: usize,
    first_example: usize,
) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for tr in pass.traces.iter().filter(|t| stacks.contains(&t.stack)) {
        let probs = g.value(tr.probs);
        let width = tr.prompt_len + tr.key_len;
        let batch = tr.key_valid.len() / tr.key_len;
        for b in 0..batch {
            let valid = &tr.key_valid[b * tr.key_len..(b + 1) * tr.key_len];
            for head in 0..num_heads {
                let base = (b * num_heads + head) * tr.query_len * width;
                let scores = (0..tr.query_len)
                    .map(|i| probs[base + i * width..base + (i + 1) * width].to_vec())
                    .collect();
                out.push(AttentionRecord {
                    stack: tr.stack,
                    layer: tr.layer,
                    head,
                    example: first_example + b,
                    prompt_len: tr.prompt_len,
                    scores,
                    // self-attention: query i is valid exactly when key i is
                    valid_query_mask: valid[..tr.query_len].to_vec(),
                    valid_key_mask: valid.to_vec(),
                });
            }
        }
    }
    out
}

/// Teacher-forced forward passes over `examples`, returning the attention
/// records of the requested stacks.
pub fn collect_records(
    model: &Model,
    examples: &[Example],
    stacks: &[Stack],
) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for (c, chunk) in examples.chunks(50).enumerate() {
        let batch = Batch::from_examples(chunk);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(model.params());
        let pass = model.forward_batch(&mut g, &mut binder, &batch)?;
        out.extend(records_from_pass(
            &g,
            &pass,
            stacks,
            model.config().num_heads,
            c * 50,
        ));
    }
    Ok(out)
}

/// Stacks worth analyzing: those carrying hyper-prompts, or the encoder
/// when none do.
pub fn default_stacks(model: &Model) -> Vec<Stack> {
    let cfg = model.config();
    let s: Vec<Stack> = Stack::BOTH
        .into_iter()
        .filter(|&s| cfg.injected_prompt_len(s) > 0)
        .collect();
    if s.is_empty() {
        vec![Stack::Encoder]
    } else {
        s
    }
}

pub fn write_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(l: usize, len: usize, rows: usize) -> AttentionRecord {
        let w = 1.0 / (l + len) as f64;
        AttentionRecord {
            stack: Stack::Encoder,
            layer: 0,
            head: 0,
            example: 0,
            prompt_len: l,
            scores: vec![vec![w; l + len]; rows],
            valid_query_mask: vec![true; rows],
            valid_key_mask: vec![true; len],
        }
    }

    #[test]
    fn uniform_mass_and_entropy() {
        let r = uniform(4, 12, 12);
        r.validate().unwrap();
        assert_eq!(attention_mass(std::slice::from_ref(&r)).unwrap(), 0.25);
        for e in token_entropy_distribution(&[r]) {
            assert!((e - 12f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_masses() {
        let mut r = uniform(2, 2, 1);
        r.scores = vec![vec![0.0, 0.0, 0.5, 0.5]];
        assert_eq!(attention_mass(std::slice::from_ref(&r)).unwrap(), 0.0);
        r.scores = vec![vec![0.5, 0.5, 0.0, 0.0]];
        assert_eq!(attention_mass(std::slice::from_ref(&r)).unwrap(), 1.0);
        // no token mass left: degenerate row, entropy 0 but still counted
        assert_eq!(token_entropy_distribution(&[r]), vec![0.0]);
    }

    #[test]
    fn one_hot_entropy_is_zero() {
        assert_eq!(renormalized_entropy(&[0.0, 1.0, 0.0], &[true; 3]), 0.0);
    }

    #[test]
    fn mixed_layers_rejected() {
        let a = uniform(2, 3, 1);
        let mut b = a.clone();
        b.layer = 1;
        assert!(attention_mass(&[a, b]).is_err());
    }

    #[test]
    fn histogram_edges_and_overflow() {
        let h = histogram(&[0.0, 0.5, 1.0, 2.0], 4, 1.0);
        assert_eq!(h.bins.len(), 5);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
    }
}
