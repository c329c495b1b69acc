//! Named parameter storage and per-step graph binding.
//!
//! Parameters live in a [`ParamStore`] keyed by path. Paths under
//! `backbone/` form the shared backbone; paths under `cond/` (hyper-prompt
//! conditioning) and `baseline/` (prompt tuning, adapters) are the
//! task-conditioned parameters.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BACKBONE_PREFIX: &str = "backbone/";
pub const CONDITIONING_PREFIX: &str = "cond/";
pub const BASELINE_PREFIX: &str = "baseline/";

/// True for task-conditioned parameter paths.
pub fn is_conditioned(path: &str) -> bool {
    path.starts_with(CONDITIONING_PREFIX) || path.starts_with(BASELINE_PREFIX)
}

pub fn is_backbone(path: &str) -> bool {
    path.starts_with(BACKBONE_PREFIX)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Index(format!("no parameter at {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Index(format!("no parameter at {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterates in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(p, _)| pred(p))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over the paths, shapes and exact bit patterns of every
    /// parameter selected by `pred`.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (path, t) in self.iter().filter(|(p, _)| pred(p)) {
            h.update(path.as_bytes());
            h.update([0u8]);
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn backbone_hash(&self) -> String {
        self.hash_where(is_backbone)
    }

    pub fn conditioning_hash(&self) -> String {
        self.hash_where(is_conditioned)
    }

    /// Per-parameter Euclidean norms, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter()
            .map(|(p, t)| (p.to_string(), t.norm()))
            .collect()
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `Normal(0, std²)`.
    Normal(f64),
    Zeros,
    Ones,
}

/// Declared path, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Materializes the tensor from a stream keyed by `(seed, path)`.
    pub fn materialize(&self, seed: u64) -> Tensor {
        match self.init {
            Init::Normal(std) => {
                let mut r = crate::rng::stream(seed, &self.path);
                Tensor::randn(&self.shape, std, &mut r)
            }
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
        }
    }
}

/// Binds store parameters into a [`Graph`] on first use.
///
/// Only parameters actually touched by a forward pass become graph leaves, so
/// untouched parameters (another task's adapter, say) receive no gradient at
/// all rather than a zero one.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    /// Every parameter tracks gradients.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| true)
    }

    /// No parameter tracks gradients (inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| false)
    }

    pub fn with_filter(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let t = self.store.get(path)?;
        let v = if (self.trainable)(path) {
            g.variable(t.clone())
        } else {
            g.constant(t.clone())
        };
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .filter_map(|(p, &v)| g.grad(v).map(|gr| (p.clone(), gr.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_bits_and_filter() {
        let mut s = ParamStore::new();
        s.insert("backbone/a", Tensor::full(&[2], 1.0));
        s.insert("cond/b", Tensor::full(&[2], 2.0));
        let bb = s.backbone_hash();
        let cond = s.conditioning_hash();
        s.get_mut("cond/b").unwrap().data_mut()[0] = 2.5;
        assert_eq!(s.backbone_hash(), bb);
        assert_ne!(s.conditioning_hash(), cond);
        // -0.0 and 0.0 hash differently
        let mut z = ParamStore::new();
        z.insert("backbone/z", Tensor::full(&[1], 0.0));
        let mut nz = ParamStore::new();
        nz.insert("backbone/z", Tensor::full(&[1], -0.0));
        assert_ne!(z.backbone_hash(), nz.backbone_hash());
    }

    #[test]
    fn binder_binds_once_and_respects_filter() {
        let mut s = ParamStore::new();
        s.insert("backbone/w", Tensor::full(&[2], 1.0));
        s.insert("cond/p", Tensor::full(&[2], 1.0));
        let mut g = Graph::new();
        let mut b = Binder::with_filter(&s, is_conditioned);
        let w = b.var(&mut g, "backbone/w").unwrap();
        let p = b.var(&mut g, "cond/p").unwrap();
        assert_eq!(b.var(&mut g, "cond/p").unwrap(), p);
        let y = g.mul(w, p).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let grads = b.gradients(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "cond/p");
        assert!(b.var(&mut g, "missing").is_err());
    }
}
