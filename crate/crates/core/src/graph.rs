//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in insertion order, which is
//! also a topological order. [`Graph::backward`] walks the nodes in exact
//! reverse order and accumulates gradients into each input; leaves consumed
//! by several operations receive the sum of all contributions.
//!
//! Values are plain row-major `f64` buffers. Dense products go through
//! `matrixmultiply`, everything else is straight loops.

use std::mem;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        // `b` is a single matrix shared by every batch entry
        shared_rhs: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        inner: usize,
        src_extent: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
        row: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for a single forward/backward pass.
///
/// A graph is confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `C[m×n] = op(A)[m×k] · op(B)[k×n] + beta·C`.
///
/// With `a_t`, `a` is stored as `k×m`; with `b_t`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf holding a copy of `t`; it tracks gradients when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Adds a leaf that tracks gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every gradient buffer so `backward` can run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward operations ------------------------------------------------

    /// Dense product. Supported forms: `[m,k]·[k,n]`, `[..,m,k]·[k,n]`
    /// (leading dims flattened) and batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb);
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(mismatch());
        }
        let (batch, m, k, n, shared_rhs, out_shape);
        if sb.len() == 2 {
            k = sa[sa.len() - 1];
            if sb[0] != k {
                return Err(mismatch());
            }
            n = sb[1];
            m = sa[..sa.len() - 1].iter().product();
            batch = 1;
            shared_rhs = true;
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            out_shape = s;
        } else {
            if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(mismatch());
            }
            batch = sa[0];
            m = sa[1];
            k = sa[2];
            n = sb[2];
            shared_rhs = false;
            out_shape = vec![batch, m, n];
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                let bs = if shared_rhs { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[bs..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(dim_err!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                sx
            ));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx, out, Op::AddBias { x, bias }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err!(
                "softmax: axis {axis} is empty or invalid for {:?}",
                shape
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| xv[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Softmax along the last axis restricted to positions where `mask` is
    /// true. Masked positions get probability exactly 0; a row with no
    /// unmasked position is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap_or(&0);
        if mask.len() != self.value(x).len() || len == 0 {
            return Err(dim_err!(
                "masked_softmax: mask of length {} for input {:?}",
                mask.len(),
                shape
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for ((row, m), o) in xv
            .chunks(len)
            .zip(mask.chunks(len))
            .zip(out.chunks_mut(len))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..len {
                if m[j] {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MaskedSoftmax { x, len }, rg))
    }

    /// Concatenates `parts` along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(dim_err!("concat: no parts")),
        };
        if axis >= first.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {:?}", first));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!(
                    "concat: part {:?} incompatible with {:?} on axis {axis}",
                    s,
                    first
                ));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let chunk = e * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                extents,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow: [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                shape
            ));
        }
        let (outer, src_extent, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * src_extent + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            Op::Narrow {
                x,
                outer,
                inner,
                src_extent,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err!("reshape: {:?} into {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || !perm
                .iter()
                .all(|&p| p < shape.len() && !mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!(
                "permute: {:?} is not a permutation for {:?}",
                perm,
                shape
            ));
        }
        let out = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row normalization over the last axis (zero mean, unit variance,
    /// epsilon [`LAYER_NORM_EPS`]) scaled by `gain`.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [n] || n == 0 {
            return Err(dim_err!(
                "layer_norm: gain {:?} does not match last axis of {:?}",
                self.shape(gain),
                shape
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[B×V]`, skipping positions equal to `ignore_index`. Returns 0
    /// with zero gradient when every position is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err!(
                "cross_entropy: logits {:?} with {} targets",
                shape,
                targets.len()
            ));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= v) {
            return Err(Error::Index(format!(
                "cross_entropy: target {bad} outside vocabulary of {v}"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Selects rows of `table` along axis 0 (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(dim_err!("gather: scalar table"));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "gather: index {bad} outside table of {rows} rows"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&tv[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(table);
        Ok(self.push(
            out_shape,
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
                row,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    // ---- backward ----------------------------------------------------------

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = &mut self.nodes[v.0];
        n.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()])
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.rg(v) {
            return;
        }
        let mut g = self.take_grad(v);
        f(&mut g, &self.nodes);
        self.put_grad(v, g);
    }

    /// Back-propagates from the scalar `loss`, accumulating into every node
    /// that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(dim_err!(
                "backward: loss must be a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.accumulate(loss, |g, _| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let gout = self.nodes[i].grad.take().expect("checked above");
            self.backward_node(i, &op, &gout);
            self.nodes[i].grad = Some(gout);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, op: &Op, gout: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                self.accumulate(a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    for t in 0..batch {
                        let bs = if shared_rhs { 0 } else { t * k * n };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gout[t * m * n..],
                            false,
                            &bv[bs..],
                            true,
                            &mut ga[t * m * k..],
                            1.0,
                        );
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    for t in 0..batch {
                        let bs = if shared_rhs { 0 } else { t * k * n };
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..],
                            true,
                            &gout[t * m * n..],
                            false,
                            &mut gb[bs..],
                            1.0,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(v, |g, _| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(x, |g, _| g.iter_mut().zip(gout).for_each(|(a, b)| *a += b));
                self.accumulate(bias, |g, _| {
                    let n = g.len();
                    if n > 0 {
                        for row in gout.chunks(n) {
                            g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |g, nodes| {
                    let bv = &nodes[b.0].value;
                    for j in 0..g.len() {
                        g[j] += gout[j] * bv[j];
                    }
                });
                self.accumulate(b, |g, nodes| {
                    let av = &nodes[a.0].value;
                    for j in 0..g.len() {
                        g[j] += gout[j] * av[j];
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(x, |g, _| {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b * s)
                });
            }
            Op::Relu(x) => {
                self.accumulate(x, |g, nodes| {
                    let xv = &nodes[x.0].value;
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                self.accumulate(x, |g, nodes| {
                    let y = &nodes[i].value;
                    for o in 0..outer {
                        for t in 0..inner {
                            let base = o * len * inner + t;
                            let dot: f64 = (0..len)
                                .map(|j| gout[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                g[p] += y[p] * (gout[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, len } => {
                self.accumulate(x, |g, nodes| {
                    let y = &nodes[i].value;
                    for ((gr, yr), dr) in g.chunks_mut(len).zip(y.chunks(len)).zip(gout.chunks(len))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Concat {
                ref parts,
                outer,
                inner,
                ref extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &e) in parts.iter().zip(extents) {
                    let chunk = e * inner;
                    self.accumulate(p, |g, _| {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            for j in 0..chunk {
                                g[o * chunk + j] += gout[src + j];
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow {
                x,
                outer,
                inner,
                src_extent,
                start,
                len,
            } => {
                self.accumulate(x, |g, _| {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let dst = (o * src_extent + start) * inner;
                        for j in 0..chunk {
                            g[dst + j] += gout[o * chunk + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(x, |g, _| g.iter_mut().zip(gout).for_each(|(a, b)| *a += b));
            }
            Op::Permute { x, ref perm } => {
                let out_shape = self.nodes[i].shape.clone();
                let mut inverse = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inverse[p] = o;
                }
                let back = permute_data(gout, &out_shape, &inverse);
                self.accumulate(x, |g, _| g.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::LayerNorm {
                x,
                gain,
                ref xhat,
                ref rstd,
            } => {
                let n = self.nodes[gain.0].value.len();
                self.accumulate(gain, |g, _| {
                    for (r, h) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += r[j] * h[j];
                        }
                    }
                });
                self.accumulate(x, |g, nodes| {
                    let gv = &nodes[gain.0].value;
                    let mut dh = vec![0.0; n];
                    for (row, &rs) in rstd.iter().enumerate() {
                        let off = row * n;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = gout[off + j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * xhat[off + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            g[off + j] += rs * (dh[j] - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ignore_index,
                ref probs,
                count,
            } => {
                let scale = if count == 0 {
                    0.0
                } else {
                    gout[0] / count as f64
                };
                self.accumulate(logits, |g, _| {
                    let v = probs.len() / targets.len().max(1);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == ignore_index {
                            continue;
                        }
                        for j in 0..v {
                            g[r * v + j] += scale * probs[r * v + j];
                        }
                        g[r * v + t] -= scale;
                    }
                });
            }
            Op::Gather {
                table,
                ref indices,
                row,
            } => {
                self.accumulate(table, |g, _| {
                    for (k, &ix) in indices.iter().enumerate() {
                        for j in 0..row {
                            g[ix * row + j] += gout[k * row + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gout[0];
                self.accumulate(x, |g, _| g.iter_mut().for_each(|a| *a += s));
            }
        }
    }
}
