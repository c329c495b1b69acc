//! Synthetic text-to-text tasks, the character tokenizer, and proportional
//! task mixing.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: usize = 3;
const ALPHABET: &str = " +0123456789abcdefghijklmnopqrstuvwxyz";
const MOD_ADD_MODULUS: u32 = 97;

/// Character-level tokenizer: pad/eos/unk followed by space, `+`, digits
/// and lowercase letters.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        Self {
            chars: ALPHABET.chars().collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.chars.len()
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&x| x == c)
                    .map_or(UNK, |p| p + SPECIALS)
            })
            .collect()
    }

    /// Renders ids as text, skipping pad and stopping at the first eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => {}
                EOS => break,
                UNK => out.push('\u{fffd}'),
                _ => out.push(self.chars.get(id - SPECIALS).copied().unwrap_or('\u{fffd}')),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortDigits,
    ModAdd,
    Parity,
}

impl TaskKind {
    /// Text prepended to every encoder input so a shared backbone can tell
    /// the tasks apart.
    pub fn prefix(self) -> &'static str {
        match self {
            TaskKind::Copy => "c ",
            TaskKind::Reverse => "r ",
            TaskKind::SortDigits => "s ",
            TaskKind::ModAdd => "m ",
            TaskKind::Parity => "p ",
        }
    }

    /// The reference answer for `input`.
    pub fn apply(self, input: &str) -> String {
        match self {
            TaskKind::Copy => input.to_string(),
            TaskKind::Reverse => input.chars().rev().collect(),
            TaskKind::SortDigits => {
                let mut d: Vec<char> = input.chars().filter(char::is_ascii_digit).collect();
                d.sort_unstable();
                d.into_iter().collect()
            }
            TaskKind::ModAdd => {
                let sum: u32 = input
                    .split('+')
                    .map(|p| p.trim().parse::<u32>().unwrap_or(0))
                    .sum();
                (sum % MOD_ADD_MODULUS).to_string()
            }
            TaskKind::Parity => {
                let s: u32 = input.chars().filter_map(|c| c.to_digit(10)).sum();
                if s.is_multiple_of(2) { "even" } else { "odd" }.to_string()
            }
        }
    }

    /// Minimum `max_input_len` able to hold any input of this kind.
    fn min_input_len(self) -> usize {
        match self {
            TaskKind::ModAdd => 5,
            _ => 1,
        }
    }

    fn draw_input(self, rng: &mut ChaCha8Rng, max_len: usize, index: usize) -> String {
        const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
        let digits = |rng: &mut ChaCha8Rng, len: usize| -> String {
            (0..len)
                .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
                .collect()
        };
        match self {
            TaskKind::Copy | TaskKind::Reverse => {
                let len = rng.random_range(1..=max_len);
                (0..len)
                    .map(|_| char::from(ALNUM[rng.random_range(0..ALNUM.len())]))
                    .collect()
            }
            TaskKind::SortDigits => {
                let len = rng.random_range(1..=max_len);
                digits(rng, len)
            }
            TaskKind::ModAdd => {
                let a = rng.random_range(0..MOD_ADD_MODULUS);
                let b = rng.random_range(0..MOD_ADD_MODULUS);
                format!("{a}+{b}")
            }
            TaskKind::Parity => {
                // classes alternate so every split is balanced
                let len = rng.random_range(1..=max_len);
                let mut s: Vec<u8> = digits(rng, len).into_bytes();
                let sum: u32 = s.iter().map(|b| u32::from(b - b'0')).sum();
                if sum as usize % 2 != index % 2 {
                    let last = s.last_mut().expect("len >= 1");
                    *last = b'0' + (*last - b'0' + 1) % 10;
                }
                String::from_utf8(s).expect("ascii digits")
            }
        }
    }
}

/// One synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub max_input_len: usize,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind, train_size: usize, eval_size: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            train_size,
            eval_size,
            seed,
            max_input_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(config_err!(
                "task {}: train_size and eval_size must be positive",
                self.name
            ));
        }
        if self.max_input_len < self.kind.min_input_len() {
            return Err(config_err!(
                "task {}: max_input_len must be at least {}",
                self.name,
                self.kind.min_input_len()
            ));
        }
        if self.name.is_empty() {
            return Err(config_err!("task names must be non-empty"));
        }
        Ok(())
    }
}

/// The five default tasks with deliberately unequal training sizes.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("copy", TaskKind::Copy, 2000, 500, 1),
        TaskSpec::new("reverse", TaskKind::Reverse, 2000, 500, 2),
        TaskSpec::new("sort_digits", TaskKind::SortDigits, 1000, 500, 3),
        TaskSpec::new("mod_add", TaskKind::ModAdd, 4000, 500, 4),
        TaskSpec::new("parity", TaskKind::Parity, 1000, 500, 5),
    ]
}

/// A raw input/target pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub input: String,
    pub target: String,
}

/// A tokenized example. `input_ids` carries the task prefix and a trailing
/// eos; `target_ids` ends with eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: usize,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
}

impl Example {
    pub fn encode(tok: &Tokenizer, kind: TaskKind, task: usize, sample: &Sample) -> Self {
        let mut input_ids = tok.encode(kind.prefix());
        input_ids.extend(tok.encode(&sample.input));
        input_ids.push(EOS);
        let mut target_ids = tok.encode(&sample.target);
        target_ids.push(EOS);
        Self {
            task,
            input_ids,
            target_ids,
        }
    }
}

/// Train and eval splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl TaskData {
    pub fn encoded(&self, tok: &Tokenizer, task: usize) -> (Vec<Example>, Vec<Example>) {
        let enc = |v: &[Sample]| {
            v.iter()
                .map(|s| Example::encode(tok, self.spec.kind, task, s))
                .collect()
        };
        (enc(&self.train), enc(&self.eval))
    }
}

fn draw_distinct(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    count: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Sample>> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let budget = 100 * count + 1000;
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let input = spec.kind.draw_input(rng, spec.max_input_len, out.len());
        if exclude.contains(&input) || !seen.insert(input.clone()) {
            continue;
        }
        let target = spec.kind.apply(&input);
        out.push(Sample { input, target });
    }
    if out.len() < count {
        return Err(config_err!(
            "task {}: could only draw {} distinct inputs of the {} requested",
            spec.name,
            out.len(),
            count
        ));
    }
    Ok(out)
}

/// Generates both splits. Eval and train come from separate seed streams and
/// train inputs never repeat an eval input.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut eval_rng = rng::stream(spec.seed, "eval");
    let eval = draw_distinct(spec, &mut eval_rng, spec.eval_size, &HashSet::new())?;
    let held_out: HashSet<String> = eval.iter().map(|s| s.input.clone()).collect();
    let mut train_rng = rng::stream(spec.seed, "train");
    let train = draw_distinct(spec, &mut train_rng, spec.train_size, &held_out)?;
    Ok(TaskData {
        spec: spec.clone(),
        train,
        eval,
    })
}

/// Infinite stream of task indices, task `τ` drawn with probability
/// `N_τ / ΣN`.
#[derive(Debug, Clone)]
pub struct MixingSampler {
    dist: WeightedIndex<u64>,
    rng: ChaCha8Rng,
}

impl MixingSampler {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(config_err!("mixing sampler needs at least one task"));
        }
        if sizes.contains(&0) {
            return Err(config_err!("mixing sampler task sizes must be positive"));
        }
        let weights: Vec<u64> = sizes.iter().map(|&s| s as u64).collect();
        let dist = WeightedIndex::new(weights).map_err(|e| config_err!("mixing weights: {e}"))?;
        Ok(Self {
            dist,
            rng: rng::stream(seed, "mixing"),
        })
    }
}

impl Iterator for MixingSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    task: String,
    input: String,
    target: String,
}

pub fn write_jsonl(path: &Path, task: &str, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = Record {
            task: task.to_string(),
            input: s.input.clone(),
            target: s.target.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset file, returning `(task name, sample)` per line.
pub fn read_jsonl(path: &Path) -> Result<Vec<(String, Sample)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        out.push((
            rec.task,
            Sample {
                input: rec.input,
                target: rec.target,
            },
        ));
    }
    Ok(out)
}
