//! Reverse-mode automatic differentiation over a linear op record.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! record once in reverse, accumulating vector-Jacobian products into
//! per-node gradient buffers. Nodes that do not depend on any
//! gradient-requiring leaf are skipped, so their gradients stay exactly zero.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, causal: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Gather { table: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient with respect to `v`; zeros if `v` is not on a path to the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match &self.by_node[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.by_node[v.0].as_deref()
    }

    /// Parameter gradients present on this tape, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params.iter().map(move |&(p, v)| (p, self.by_node[v.0].as_deref()))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used for gradient checks and for
    /// staged backward passes).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn input_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_arc(store.shared(id), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter value as a constant: contributes to the forward pass but
    /// blocks gradient flow back into the parameter.
    pub fn param_detached(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant_shared(store.shared(id))
    }

    /// Copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.shared_value(v);
        self.constant_shared(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k, c) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err("matmul", alloc::format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(av.data(), bv.data(), &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: r×k`, `b: c×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k, c) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_nt", alloc::format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; r * c];
        gemm_nt(av.data(), bv.data(), &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMulNT(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the row vector `row` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(shape_err("add_row", alloc::format!("{:?} + row {:?}", av.shape(), rv.shape())));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * s).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax. With `causal`, row `i` only attends to columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let lim = if causal { (i + 1).min(c) } else { c };
            let max = row[..lim].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + lim];
            let mut sum = 0.0;
            for (dst, &v) in o.iter_mut().zip(&row[..lim]) {
                *dst = libm::exp(v - max);
                sum += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x, causal }, rg)
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", "gain/bias length must equal row width"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so that
    /// evaluation (`rate == 0` or no call) is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(alloc::format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Row lookup: output row `r` is `table[rows[r]]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { what: "gather row", index: r, bound: n });
            }
            data.extend_from_slice(tv.row(r));
        }
        let t = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, rows: rows.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            r += self.value(p).rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + width > c {
            return Err(shape_err("slice_cols", alloc::format!("{start}+{width} > {c}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, width, data)?, Op::SliceCols { x, start }, rg))
    }

    /// Scales each row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut norms = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let n = libm::sqrt(dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate("zero-norm vector cannot be normalized"));
            }
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = dot(d, d);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(shape_err("softmax_cross_entropy", alloc::format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index { what: "target class", index: t, bound: v });
            }
            let row = lv.row(i);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
            // The max term contributes exactly 1; summing the rest separately
            // lets log1p keep precision for near-certain predictions.
            let mut rest = 0.0;
            for (j, (p, &x)) in probs[i * v..(i + 1) * v].iter_mut().zip(row).enumerate() {
                *p = libm::exp(x - max);
                if j != arg {
                    rest += *p;
                }
            }
            let sum = 1.0 + rest;
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= sum;
            }
            loss += libm::log1p(rest) + (max - row[t]);
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Cosine similarity of two equally sized tensors (flattened), as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(shape_err("cosine_similarity", alloc::format!("{la} vs {lb}")));
        }
        let a2 = self.as_row(a)?;
        let b2 = self.as_row(b)?;
        let an = self.normalize_rows(a2)?;
        let bn = self.normalize_rows(b2)?;
        self.matmul_nt(an, bn)
    }

    /// View of `x` as a single row. Implemented as a gather so gradients flow.
    fn as_row(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rows() == 1 {
            return Ok(x);
        }
        let v = self.value(x);
        let n = v.len();
        // Flatten by concatenating rows along columns.
        let rows: Vec<Var> = (0..v.rows()).map(|i| self.gather(x, &[i])).collect::<Result<_>>()?;
        let out = self.concat_cols(&rows)?;
        debug_assert_eq!(self.value(out).len(), n);
        Ok(out)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with_seed(loss, &Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(&self, root: Var, seed: &Tensor) -> Result<Grads> {
        if seed.len() != self.value(root).len() {
            return Err(shape_err("backward seed", "seed size differs from root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.data().to_vec());
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Grads { by_node: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    gemm_nt(g, bv.data(), accumulate(&mut grads[a.0], r * k), r, c, k);
                }
                if self.rg(*b) {
                    gemm_tn(av.data(), g, accumulate(&mut grads[b.0], k * c), r, k, c);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    gemm_nn(g, bv.data(), accumulate(&mut grads[a.0], r * k), r, c, k);
                }
                if self.rg(*b) {
                    gemm_tn(g, av.data(), accumulate(&mut grads[b.0], c * k), r, c, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let dst = accumulate(&mut grads[v.0], g.len());
                        for (d, &x) in dst.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let dst = accumulate(&mut grads[a.0], g.len());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.rg(*b) {
                    let dst = accumulate(&mut grads[b.0], g.len());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let dst = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let dst = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    let dst = accumulate(&mut grads[a.0], g.len());
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.rg(*row) {
                    let c = self.value(*row).len();
                    let dst = accumulate(&mut grads[row.0], c);
                    for chunk in g.chunks_exact(c) {
                        for (d, &x) in dst.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let dst = accumulate(&mut grads[a.0], g.len());
                for (d, &x) in dst.iter_mut().zip(g) {
                    *d += x * s;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let dst = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        dst[i] += g[i];
                    }
                }
            }
            Op::Softmax { x, causal } => {
                let (r, c) = (val.rows(), val.cols());
                let y = val.data();
                let dst = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    let lim = if *causal { (i + 1).min(c) } else { c };
                    let yr = &y[i * c..i * c + lim];
                    let gr = &g[i * c..i * c + lim];
                    let inner = dot(yr, gr);
                    for j in 0..lim {
                        dst[i * c + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = (val.rows(), val.cols());
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let dst = accumulate(&mut grads[gain.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            dst[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let dst = accumulate(&mut grads[bias.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            dst[j] += g[i * c + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dst = accumulate(&mut grads[x.0], r * c);
                    let cf = c as f64;
                    for i in 0..r {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            dst[i * c + j] +=
                                inv_std[i] * (dh - sum_dh / cf - xhat[i * c + j] * sum_dh_h / cf);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let dst = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * mask[i];
                }
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let dst = accumulate(&mut grads[table.0], tv.len());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dst[r * c + j] += g[i * c + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = val.rows();
                let total = val.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let dst = accumulate(&mut grads[p.0], r * w);
                        for i in 0..r {
                            for j in 0..w {
                                dst[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let dst = accumulate(&mut grads[p.0], n);
                        for j in 0..n {
                            dst[j] += g[off + j];
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = val.cols();
                let dst = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..w {
                        dst[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let (r, c) = (val.rows(), val.cols());
                let y = val.data();
                let dst = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inner = dot(yr, gr);
                    for j in 0..c {
                        dst[i * c + j] += (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let dst = accumulate(&mut grads[x.0], n);
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                let dst = accumulate(&mut grads[x.0], xv.len());
                for (d, &v) in dst.iter_mut().zip(xv) {
                    *d += 2.0 * v * g[0];
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (n, v) = (lv.rows(), lv.cols());
                let scale = g[0] / n as f64;
                let dst = accumulate(&mut grads[logits.0], n * v);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dst[i * v + j] += (probs[i * v + j] - onehot) * scale;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 256]));
        let loss = tape.softmax_cross_entropy(l, &[17]).unwrap();
        assert!((tape.value(loss).item() - 256f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).item() - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_near_certain() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[&[10.0, -10.0]]).unwrap());
        let node = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let loss = tape.value(node).item();
        let want = (-20f64).exp().ln_1p();
        assert!((loss - want).abs() < 1e-18);
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = Rng::seed_from_u64(11);
        let logits = rand_tensor(&mut rng, &[4, 8]);
        let targets = [3usize, 0, 7, 5];
        let mut direct = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct += -(row[t].exp() / z).ln();
        }
        direct /= 4.0;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let node = tape.softmax_cross_entropy(l, &targets).unwrap();
        let got = tape.value(node).item();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(tape.softmax_cross_entropy(l, &[4]), Err(Error::Index { .. })));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(alloc::vec![2.0, 1.0]));
        let c = tape.cosine_similarity(a, b).unwrap();
        assert!((tape.value(c).item() - 0.8).abs() < 1e-15);
        let same = tape.cosine_similarity(a, a).unwrap();
        assert!((tape.value(same).item() - 1.0).abs() < 1e-15);
        let e1 = tape.constant(Tensor::vector(alloc::vec![1.0, 0.0]));
        let e2 = tape.constant(Tensor::vector(alloc::vec![0.0, 1.0]));
        let o = tape.cosine_similarity(e1, e2).unwrap();
        assert_eq!(tape.value(o).item(), 0.0);
        let z = tape.constant(Tensor::vector(alloc::vec![0.0, 0.0]));
        assert!(matches!(tape.cosine_similarity(a, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 6], 3.25));
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 16]));
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for i in 0..3 {
            let r = tape.value(y).row(i);
            let m: f64 = r.iter().sum::<f64>() / 16.0;
            let v: f64 = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(&mut rng, &[3, 4]));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn dropout_is_inverted() {
        let mut rng = Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 20000], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 20000.0;
        assert!((mean - 1.0).abs() < 0.05);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask() {
        let mut rng = Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[4, 4]));
        let y = tape.softmax_rows(x, true);
        for i in 0..4 {
            let r = tape.value(y).row(i);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::full(&[2], 1.0));
        let b = tape.input(Tensor::full(&[2], 2.0));
        let _unused = tape.sum(b);
        let loss = tape.sum_squares(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, b).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(&tape, a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn param_nodes_are_memoized_and_detach_blocks() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::full(&[3], 1.5));
        let mut tape = Tape::new();
        let v1 = tape.param(&store, p);
        let v2 = tape.param(&store, p);
        assert_eq!(v1, v2);
        let d = tape.param_detached(&store, p);
        let s = tape.add(v1, d).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        let pg: Vec<_> = g.params().collect();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.unwrap(), &[1.0, 1.0, 1.0]);
    }
}
