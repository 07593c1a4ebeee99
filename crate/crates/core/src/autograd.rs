//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph; [`Graph::backward`] returns gradients
//! only for the parameters actually reachable from the loss, so an optimizer
//! can leave untouched parameters (and their moment estimates) exactly as
//! they were.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Tensor};

pub type ParamId = usize;

/// Optimizer parameter groups. The encoder is tuned with a smaller learning
/// rate than the newly initialized heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gather(Var, Rc<Vec<usize>>),
    Assemble(Vec<Var>, Rc<Vec<(usize, usize)>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    BlockScores { q: Var, k: Var, block: usize },
    BlockApply { p: Var, v: Var, block: usize, rows_per_block: usize },
    Unfold { input: Var, block: usize, width: usize },
    BlockMax { input: Var, argmax: Vec<usize> },
    RowSum(Var),
    Sum(Var),
    GradReverse(Var, f64),
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Clamp applied inside [`Graph::log`].
pub const LOG_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax; entries whose mask is `false` get probability zero.
/// Rows with no valid entry come out all-zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let valid = |c: usize| mask.map_or(true, |m| m[r * x.cols() + c]);
        let max = (0..x.cols())
            .filter(|&c| valid(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..row.len() {
            if valid(c) {
                o[c] = (row[c] - max).exp();
                total += o[c];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Gradients of the parameters reachable from a loss.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// `a + row` with `row` (1×c) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a 1×c row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with `row` (1×c) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a 1×c row");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a, s))
    }

    /// `m * a + c` elementwise.
    pub fn affine(&mut self, a: Var, m: f64, c: f64) -> Var {
        let value = self.value(a).map(|x| m * x + c);
        self.push(value, Op::Affine(a, m))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(max(a, LOG_EPS))`; no gradient flows through clamped entries.
    /// NaN inputs stay NaN.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x.is_nan() { x } else { x.max(LOG_EPS).ln() });
        self.push(value, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        if let Some(m) = mask {
            assert_eq!(m.len(), self.value(a).len(), "softmax mask size mismatch");
        }
        let value = softmax_rows(self.value(a), mask);
        self.push(value, Op::Softmax(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        let n = x.cols() as f64;
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm { input: a, inv_std })
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(index.len(), x.cols());
        for (r, &src) in index.iter().enumerate() {
            value.row_mut(r).copy_from_slice(x.row(src));
        }
        self.push(value, Op::Gather(a, Rc::new(index)))
    }

    /// Row `r` of the output is row `index[r].1` of `parts[index[r].0]`.
    pub fn assemble_rows(&mut self, parts: Vec<Var>, index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut value = Tensor::zeros(index.len(), cols);
        for (r, &(p, src)) in index.iter().enumerate() {
            let part = self.value(parts[p]);
            assert_eq!(part.cols(), cols, "assemble_rows width mismatch");
            value.row_mut(r).copy_from_slice(part.row(src));
        }
        self.push(value, Op::Assemble(parts, Rc::new(index)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in &parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        self.push(value, Op::Reshape(a))
    }

    /// Blockwise `q k^T`: rows are grouped into blocks of `block` rows (one
    /// block per sequence); row `r` is scored against the keys of its own
    /// block only. Output is `rows × block`.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.shape(), kv.shape(), "block_scores shape mismatch");
        assert_eq!(qv.rows() % block, 0, "rows not a multiple of block");
        let mut value = Tensor::zeros(qv.rows(), block);
        for r in 0..qv.rows() {
            let base = (r / block) * block;
            for j in 0..block {
                value.set(r, j, dot(qv.row(r), kv.row(base + j)));
            }
        }
        self.push(value, Op::BlockScores { q, k, block })
    }

    /// Blockwise weighted sum: output row `r` is
    /// `Σ_j p[r, j] · v[(r / rows_per_block) · block + j]`.
    pub fn block_apply(&mut self, p: Var, v: Var, block: usize, rows_per_block: usize) -> Var {
        let (pv, vv) = (self.value(p), self.value(v));
        assert_eq!(pv.cols(), block, "block_apply weight width mismatch");
        assert_eq!(
            pv.rows() / rows_per_block * block,
            vv.rows(),
            "block_apply block count mismatch"
        );
        let mut value = Tensor::zeros(pv.rows(), vv.cols());
        for r in 0..pv.rows() {
            let base = (r / rows_per_block) * block;
            let out = value.row_mut(r);
            for j in 0..block {
                let w = pv.get(r, j);
                if w == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(vv.row(base + j)) {
                    *o += w * x;
                }
            }
        }
        self.push(
            value,
            Op::BlockApply {
                p,
                v,
                block,
                rows_per_block,
            },
        )
    }

    /// Sliding windows of `width` consecutive rows inside each block of
    /// `block` rows, flattened: output has `blocks · (block - width + 1)`
    /// rows and `width · cols` columns.
    pub fn unfold(&mut self, a: Var, block: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(width >= 1 && width <= block, "unfold width out of range");
        assert_eq!(x.rows() % block, 0, "rows not a multiple of block");
        let blocks = x.rows() / block;
        let steps = block - width + 1;
        let c = x.cols();
        let mut value = Tensor::zeros(blocks * steps, width * c);
        for b in 0..blocks {
            for t in 0..steps {
                let out = value.row_mut(b * steps + t);
                for j in 0..width {
                    out[j * c..(j + 1) * c].copy_from_slice(x.row(b * block + t + j));
                }
            }
        }
        self.push(
            value,
            Op::Unfold {
                input: a,
                block,
                width,
            },
        )
    }

    /// Column-wise max over the first `valid[b]` rows of each block of
    /// `block` rows. Output is `blocks × cols`.
    pub fn block_max(&mut self, a: Var, block: usize, valid: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), valid.len() * block, "block_max block count mismatch");
        let mut value = Tensor::zeros(valid.len(), x.cols());
        let mut argmax = Vec::with_capacity(valid.len() * x.cols());
        for (b, &n) in valid.iter().enumerate() {
            assert!(n >= 1 && n <= block, "block_max valid count out of range");
            for c in 0..x.cols() {
                let mut best = b * block;
                for t in 1..n {
                    if x.get(b * block + t, c) > x.get(best, c) {
                        best = b * block + t;
                    }
                }
                value.set(b, c, x.get(best, c));
                argmax.push(best);
            }
        }
        self.push(value, Op::BlockMax { input: a, argmax })
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Tensor::column_vector(data);
        self.push(value, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Identity forward; the backward pass multiplies the gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: Var, scale: f64) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradReverse(a, scale))
    }

    /// Identity forward; blocks all gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Param(id) => {
                    out.grads.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let mut da = g.clone();
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let ar = av.row(r);
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            dr.data_mut()[c] += *d * ar[c];
                            *d *= rv.data()[c];
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, da);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) | Op::Affine(a, s) => {
                    accumulate(&mut grads, *a, g.scaled(*s));
                }
                Op::Gelu(a) => {
                    let da = g.zip_map(self.value(*a), |d, x| d * gelu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let da = g.zip_map(self.value(*a), |d, x| if x > LOG_EPS { d / x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((d, &yy), &gg) in da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d = yy * (gg - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        for ((d, &gg), &yy) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Gather(a, index) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (r, &s) in index.iter().enumerate() {
                        for (d, x) in da.row_mut(s).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Assemble(parts, index) => {
                    let mut dparts: Vec<Option<Tensor>> = vec![None; parts.len()];
                    for (r, &(p, s)) in index.iter().enumerate() {
                        let dp = dparts[p].get_or_insert_with(|| {
                            let v = self.value(parts[p]);
                            Tensor::zeros(v.rows(), v.cols())
                        });
                        for (d, x) in dp.row_mut(s).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    for (p, dp) in dparts.into_iter().enumerate() {
                        if let Some(dp) = dp {
                            accumulate(&mut grads, parts[p], dp);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshape(rows, cols));
                }
                Op::BlockScores { q, k, block } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                    let mut dk = Tensor::zeros(kv.rows(), kv.cols());
                    for r in 0..qv.rows() {
                        let base = (r / block) * block;
                        for j in 0..*block {
                            let w = g.get(r, j);
                            if w == 0.0 {
                                continue;
                            }
                            for (d, x) in dq.row_mut(r).iter_mut().zip(kv.row(base + j)) {
                                *d += w * x;
                            }
                            for (d, x) in dk.row_mut(base + j).iter_mut().zip(qv.row(r)) {
                                *d += w * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                }
                Op::BlockApply {
                    p,
                    v,
                    block,
                    rows_per_block,
                } => {
                    let (pv, vv) = (self.value(*p), self.value(*v));
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                    for r in 0..pv.rows() {
                        let base = (r / rows_per_block) * block;
                        let gr = g.row(r);
                        for j in 0..*block {
                            dp.set(r, j, dot(gr, vv.row(base + j)));
                            let w = pv.get(r, j);
                            if w != 0.0 {
                                for (d, x) in dv.row_mut(base + j).iter_mut().zip(gr) {
                                    *d += w * x;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *p, dp);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Unfold {
                    input,
                    block,
                    width,
                } => {
                    let x = self.value(*input);
                    let c = x.cols();
                    let blocks = x.rows() / block;
                    let steps = block - width + 1;
                    let mut da = Tensor::zeros(x.rows(), c);
                    for b in 0..blocks {
                        for t in 0..steps {
                            let gr = g.row(b * steps + t);
                            for j in 0..*width {
                                for (d, v) in da
                                    .row_mut(b * block + t + j)
                                    .iter_mut()
                                    .zip(&gr[j * c..(j + 1) * c])
                                {
                                    *d += v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::BlockMax { input, argmax } => {
                    let x = self.value(*input);
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    let cols = x.cols();
                    for (i, &src) in argmax.iter().enumerate() {
                        let (b, c) = (i / cols, i % cols);
                        let cur = da.get(src, c);
                        da.set(src, c, cur + g.get(b, c));
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::RowSum(a) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let v = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|d| *d = v);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.scalar_value()));
                }
                Op::GradReverse(a, s) => {
                    accumulate(&mut grads, *a, g.scaled(-*s));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to every scalar of
    /// parameter `id`, compared to the tape gradient.
    fn check_param(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss);
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            let v = store.value(id);
            Tensor::zeros(v.rows(), v.cols())
        });
        let h = 1e-5;
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store);
            let up = gp.value(lp).scalar_value();
            store.value_mut(id).data_mut()[i] = orig - h;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store);
            let down = gm.value(lm).scalar_value();
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            assert!(err < 1e-5, "param {id} entry {i}: analytic {a} numeric {numeric}");
        }
    }

    fn store_with(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), ParamGroup::Head, Tensor::randn(r, c, 0.7, &mut rng));
        }
        store
    }

    #[test]
    fn dense_ops_gradients() {
        let mut store = store_with(&[(4, 3), (3, 2), (1, 2), (4, 2), (1, 2)], 1);
        let f = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, 0);
            let w = g.param(s, 1);
            let b = g.param(s, 2);
            let other = g.param(s, 3);
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.gelu(h);
            let ln = g.layer_norm_rows(h, 1e-5);
            let gain = g.param(s, 4);
            let ln = g.mul_row(ln, gain);
            let m = g.mul(ln, other);
            let sm = g.softmax_rows(m, Some(&[true, true, true, false, true, true, false, true]));
            let lg = g.log(sm);
            let sg = g.sigmoid(h);
            let a = g.affine(sg, -2.0, 1.0);
            let t = g.add(lg, a);
            let rs = g.row_sum(t);
            let sq = g.mul(rs, rs);
            g.mean(sq)
        };
        for id in 0..5 {
            check_param(&mut store, id, &f);
        }
    }

    #[test]
    fn block_ops_gradients() {
        // 2 blocks of 3 rows, width 4.
        let mut store = store_with(&[(6, 4), (6, 4), (6, 4), (2, 3), (8, 2)], 2);
        let f = |g: &mut Graph, s: &ParamStore| {
            let q = g.param(s, 0);
            let k = g.param(s, 1);
            let v = g.param(s, 2);
            let pool = g.param(s, 3);
            let kern = g.param(s, 4);
            let sc = g.block_scores(q, k, 3);
            let p = g.softmax_rows(sc, None);
            let o = g.block_apply(p, v, 3, 3);
            let pw = g.softmax_rows(pool, None);
            let pooled = g.block_apply(pw, o, 3, 1);
            let un = g.unfold(o, 3, 2);
            let conv = g.matmul(un, kern);
            let mx = g.block_max(conv, 2, &[2, 1]);
            let left = g.slice_cols(pooled, 1, 3);
            let cat = g.concat_cols(vec![left, mx]);
            let gathered = g.gather_rows(o, vec![5, 0, 0]);
            let asm = g.assemble_rows(vec![cat, gathered], vec![(1, 2), (0, 1), (1, 0)]);
            let r = g.reshape(asm, 4, 3);
            let sq = g.mul(r, r);
            g.sum(sq)
        };
        for id in 0..5 {
            check_param(&mut store, id, &f);
        }
    }

    #[test]
    fn detach_blocks_gradient_and_unreached_params_are_absent() {
        let store = store_with(&[(2, 2), (2, 2), (2, 2)], 3);
        let mut g = Graph::new();
        let a = g.param(&store, 0);
        let b = g.param(&store, 1);
        let d = g.detach(b);
        let s = g.add(a, d);
        let loss = g.sum(s);
        let grads = g.backward(loss);
        assert!(grads.contains(0));
        assert!(!grads.contains(1));
        assert!(!grads.contains(2));
    }

    #[test]
    fn grad_reverse_negates() {
        let store = store_with(&[(1, 3)], 4);
        let mut g = Graph::new();
        let a = g.param(&store, 0);
        let r = g.grad_reverse(a, 1.0);
        assert_eq!(g.value(r), g.value(a));
        let loss = g.sum(r);
        let grads = g.backward(loss);
        assert_eq!(grads.get(0).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = Tensor::from_rows(&[vec![1.0, 50.0, 2.0]]);
        let y = softmax_rows(&x, Some(&[true, false, true]));
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.get(0, 0) + y.get(0, 2) - 1.0).abs() < 1e-12);
        let none = softmax_rows(&x, Some(&[false, false, false]));
        assert_eq!(none.data(), &[0.0, 0.0, 0.0]);
    }
}
