//! Recording tape and the differentiable operations on it.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Gradient accumulation always
//! follows that order, which keeps results bit-reproducible.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, softmax_in_place, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention group: queries `q_start..q_start+q_len` attend over keys
/// `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Block {
    pub fn new(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            k_start,
            k_len,
        }
    }

    /// `n` equal self-attention groups of `len` rows each.
    pub fn uniform(n: usize, len: usize) -> Vec<Block> {
        (0..n).map(|b| Block::new(b * len, len, b * len, len)).collect()
    }

    /// `n` groups with one query row each over `len` key rows.
    pub fn pooling(n: usize, len: usize) -> Vec<Block> {
        (0..n).map(|b| Block::new(b, 1, b * len, len)).collect()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    ColSums(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    BlockMeanRows(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<Block>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the loss with respect to `v` (zeros if it did not influence the loss).
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradients for every trainable parameter registered on `tape`, in
    /// registration order. Parameters that did not reach the loss get zeros.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Vec<f64>)> {
        tape.params
            .iter()
            .filter(|(_, v)| tape.nodes[v.0].needs_grad)
            .map(|&(id, v)| {
                let g = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; tape.nodes[v.0].value.len()]);
                (id, g)
            })
            .collect()
    }

    /// Adds the parameter gradients into `store`'s gradient buffers.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (id, g) in self.param_grads(tape) {
            store.accumulate_grad(id, &g);
        }
    }
}

fn as_matrix(t: &Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t.clone()
    } else {
        Tensor::matrix(t.rows(), t.cols(), t.data().to_vec())
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// A leaf that receives gradients.
    pub fn var(&mut self, value: &Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf, false)
    }

    /// Registers a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.push(as_matrix(store.get(id)), Op::Leaf, store.is_trainable(id));
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    /// Attention probabilities of an attention node, one `q_len × k_len`
    /// row-major matrix per (block, head) in block-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul {}x{} · {}x{}", ta.rows(), ta.cols(), tb.rows(), tb.cols());
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out), Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows(), ta.cols()), (tb.rows(), tb.cols()), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(r));
        assert_eq!(tr.rows(), 1, "add_row expects a single row");
        assert_eq!(ta.cols(), tr.cols(), "add_row column mismatch");
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(tr.data()).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(r);
        self.push(t, Op::AddRow(a, r), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 × c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(r));
        assert_eq!(tr.rows(), 1, "mul_row expects a single row");
        assert_eq!(ta.cols(), tr.cols(), "mul_row column mismatch");
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(tr.data()).for_each(|(x, y)| *x *= y);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(r);
        self.push(t, Op::MulRow(a, r), ng)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.cols(), 1, "mul_col expects a column");
        assert_eq!(ta.rows(), tc.rows(), "mul_col row mismatch");
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, s) in data.chunks_mut(c).zip(tc.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a) || self.ng(col);
        self.push(t, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    // ---- elementwise nonlinearities ----

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmaxRows(a), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a);
        self.push(t, Op::LayerNormRows(a, eps), ng)
    }

    /// Scales each row to unit L2 norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row_norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor::matrix(ta.rows(), c, data);
        let ng = self.ng(a);
        self.push(t, Op::L2NormalizeRows(a), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// `r × c → r × 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().chunks(ta.cols()).map(|r| r.iter().sum()).collect();
        let t = Tensor::matrix(ta.rows(), 1, data);
        let ng = self.ng(a);
        self.push(t, Op::RowSums(a), ng)
    }

    /// `r × c → 1 × c`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = vec![0.0; c];
        for row in ta.data().chunks(c) {
            data.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(1, c, data), Op::ColSums(a), ng)
    }

    /// Mean of each consecutive group of `block` rows.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Var {
        let ta = self.value(a);
        assert!(block > 0 && ta.rows().is_multiple_of(block), "block_mean_rows: {} rows by {block}", ta.rows());
        let (c, groups) = (ta.cols(), ta.rows() / block);
        let mut data = vec![0.0; groups * c];
        for (i, row) in ta.data().chunks(c).enumerate() {
            let g = i / block;
            data[g * c..(g + 1) * c].iter_mut().zip(row).for_each(|(s, x)| *s += x / block as f64);
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(groups, c, data), Op::BlockMeanRows(a, block), ng)
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols(), "slice_cols out of range");
        let data = ta.data().chunks(ta.cols()).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let t = Tensor::matrix(ta.rows(), len, data);
        let ng = self.ng(a);
        self.push(t, Op::SliceCols(a, start), ng)
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < ta.rows(), "gather_rows index {i} out of {}", ta.rows());
            data.extend_from_slice(ta.row_slice(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(idx.len(), c, data), Op::Gather(a, idx.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).reshape(rows, cols).expect("reshape size");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Scaled dot-product attention over independent groups.
    ///
    /// `q` is `nq × d`, `k` is `nk × d`, `v` is `nk × dv`; both `d` and `dv`
    /// split evenly into `heads` column chunks. Each query row must belong to
    /// exactly one block. Scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: &[Block]) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d, nk, dv) = (tq.rows(), tq.cols(), tk.rows(), tv.cols());
        assert_eq!(tk.cols(), d, "attention key width");
        assert_eq!(tv.rows(), nk, "attention value rows");
        assert!(heads > 0 && d % heads == 0 && dv % heads == 0, "attention heads {heads} vs widths {d}/{dv}");
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut covered = vec![false; nq];
        let mut out = vec![0.0; nq * dv];
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for b in blocks {
            assert!(b.q_start + b.q_len <= nq && b.k_start + b.k_len <= nk && b.k_len > 0, "attention block out of range");
            for i in b.q_start..b.q_start + b.q_len {
                assert!(!covered[i], "query row {i} in two attention blocks");
                covered[i] = true;
            }
            for h in 0..heads {
                let mut p = vec![0.0; b.q_len * b.k_len];
                for i in 0..b.q_len {
                    let qr = &tq.row_slice(b.q_start + i)[h * dh..(h + 1) * dh];
                    let row = &mut p[i * b.k_len..(i + 1) * b.k_len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kr = &tk.row_slice(b.k_start + j)[h * dh..(h + 1) * dh];
                        *s = dot(qr, kr) * scale;
                    }
                    softmax_in_place(row);
                    let orow = &mut out[(b.q_start + i) * dv + h * dvh..(b.q_start + i) * dv + (h + 1) * dvh];
                    for (j, &w) in row.iter().enumerate() {
                        let vr = &tv.row_slice(b.k_start + j)[h * dvh..(h + 1) * dvh];
                        orow.iter_mut().zip(vr).for_each(|(o, x)| *o += w * x);
                    }
                }
                probs.push(p);
            }
        }
        assert!(covered.iter().all(|&c| c), "attention blocks must cover every query row");
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::matrix(nq, dv, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks: blocks.to_vec(),
                probs,
            },
            ng,
        )
    }

    // ---- backward ----

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads {
            grads,
            shapes: self.nodes.iter().map(|nd| (nd.value.rows(), nd.value.cols())).collect(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).transpose();
                acc(*a, gt.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.to_vec());
                let c = out.cols();
                let mut dr = vec![0.0; c];
                for row in g.chunks(c) {
                    dr.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                acc(*r, dr);
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (val(*a), val(*r));
                let c = out.cols();
                let mut da = g.to_vec();
                let mut dr = vec![0.0; c];
                for (grow, arow) in da.chunks_mut(c).zip(ta.data().chunks(c)) {
                    for j in 0..c {
                        dr[j] += grow[j] * arow[j];
                        grow[j] *= tr.data()[j];
                    }
                }
                acc(*a, da);
                acc(*r, dr);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let c = out.cols();
                let mut da = g.to_vec();
                let mut dc = vec![0.0; tc.rows()];
                for (r, (grow, arow)) in da.chunks_mut(c).zip(ta.data().chunks(c)).enumerate() {
                    dc[r] = dot(grow, arow);
                    let s = tc.data()[r];
                    grow.iter_mut().for_each(|x| *x *= s);
                }
                acc(*a, da);
                acc(*col, dc);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(x, y)| x * y).collect()),
            Op::Ln(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect()),
            Op::Abs(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(x, y)| x * sign(*y)).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(x, y)| 2.0 * x * y).collect()),
            Op::Tanh(a) => acc(*a, g.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect()),
            Op::Softplus(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(x, y)| x * sigmoid(*y)).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter().zip(val(*a).data()).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect(),
            ),
            Op::Gelu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(dx, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        dx * d
                    })
                    .collect(),
            ),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), prow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s = dot(grow, prow);
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - s);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), lrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - lrow[j].exp() * s;
                    }
                }
                acc(*a, da);
            }
            Op::LayerNormRows(a, eps) => {
                let ta = val(*a);
                let c = out.cols();
                let mut da = vec![0.0; g.len()];
                for (((drow, grow), yrow), xrow) in da
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                    .zip(ta.data().chunks(c))
                {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = dot(grow, yrow) / c as f64;
                    for j in 0..c {
                        drow[j] = inv * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                acc(*a, da);
            }
            Op::L2NormalizeRows(a) => {
                let ta = val(*a);
                let c = out.cols();
                let mut da = vec![0.0; g.len()];
                for (((drow, grow), yrow), xrow) in da
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                    .zip(ta.data().chunks(c))
                {
                    let n = row_norm(xrow);
                    let s = dot(yrow, grow);
                    for j in 0..c {
                        drow[j] = (grow[j] - yrow[j] * s) / n;
                    }
                }
                acc(*a, da);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowSums(a) => {
                let c = val(*a).cols();
                acc(*a, g.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect());
            }
            Op::ColSums(a) => {
                let r = val(*a).rows();
                acc(*a, (0..r).flat_map(|_| g.iter().copied()).collect());
            }
            Op::BlockMeanRows(a, block) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (i, row) in da.chunks_mut(c).enumerate() {
                    let gb = &g[(i / block) * c..(i / block + 1) * c];
                    row.iter_mut().zip(gb).for_each(|(d, x)| *d = x / *block as f64);
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        acc(p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.ng(p) {
                        acc(p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let (c, len) = (ta.cols(), out.cols());
                let mut da = vec![0.0; ta.len()];
                for (drow, grow) in da.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                acc(*a, da);
            }
            Op::Gather(a, idx) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (k, &r) in idx.iter().enumerate() {
                    da[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(d, x)| *d += x);
                }
                acc(*a, da);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (d, dv) = (tq.cols(), tv.cols());
                let (dh, dvh) = (d / heads, dv / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dvv = vec![0.0; tv.len()];
                for (bi, b) in blocks.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[bi * heads + h];
                        for i in 0..b.q_len {
                            let qi = b.q_start + i;
                            let go = &g[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                            let prow = &p[i * b.k_len..(i + 1) * b.k_len];
                            // dP_ij = go · v_j ; dS = P ⊙ (dP − Σ P dP)
                            let mut dp = vec![0.0; b.k_len];
                            for j in 0..b.k_len {
                                let kj = b.k_start + j;
                                let vr = &tv.data()[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                                dp[j] = dot(go, vr);
                                let dvr = &mut dvv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                                dvr.iter_mut().zip(go).for_each(|(a, x)| *a += prow[j] * x);
                            }
                            let s = dot(&dp, prow);
                            let qr = &tq.data()[qi * d + h * dh..qi * d + (h + 1) * dh];
                            for j in 0..b.k_len {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = b.k_start + j;
                                let kr = &tk.data()[kj * d + h * dh..kj * d + (h + 1) * dh];
                                let dqr = &mut dq[qi * d + h * dh..qi * d + (h + 1) * dh];
                                dqr.iter_mut().zip(kr).for_each(|(a, x)| *a += ds * x);
                                let dkr = &mut dk[kj * d + h * dh..kj * d + (h + 1) * dh];
                                dkr.iter_mut().zip(qr).for_each(|(a, x)| *a += ds * x);
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dvv);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_norm(row: &[f64]) -> f64 {
    let n = dot(row, row).sqrt();
    if n > 0.0 {
        n
    } else {
        1.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
