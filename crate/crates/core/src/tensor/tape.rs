//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for each forward pass. Each recorded node keeps
//! its output value, the operation that produced it, and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse order.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Destination-grouped edge list for graph attention. Edges are sorted by
/// `(dst, src)`; `offsets[g]..offsets[g + 1]` spans group `g`.
#[derive(Clone, Debug)]
struct EdgeGroups {
    dst: Vec<usize>,
    src: Vec<usize>,
    offsets: Vec<usize>,
}

impl EdgeGroups {
    fn new(edges: &[(usize, usize)]) -> Self {
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        let mut dst = Vec::new();
        let mut src = Vec::with_capacity(sorted.len());
        let mut offsets = Vec::new();
        for (i, &(d, s)) in sorted.iter().enumerate() {
            if dst.last() != Some(&d) {
                dst.push(d);
                offsets.push(i);
            }
            src.push(s);
        }
        offsets.push(sorted.len());
        Self { dst, src, offsets }
    }

    fn groups(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        self.dst
            .iter()
            .enumerate()
            .map(|(g, &d)| (d, self.offsets[g]..self.offsets[g + 1]))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
        rows: usize,
    },
    ConcatCols(Var, Var),
    RowBlend {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    SeqAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        valid: Vec<bool>,
    },
    GraphAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        edges: EdgeGroups,
    },
    CosineRows(Var, Var),
    PickCols {
        x: Var,
        index: Vec<usize>,
    },
    SegmentLogSumExp {
        x: Var,
        offsets: Vec<usize>,
    },
    SumAll(Var),
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowBlend { .. } => "row_blend",
            Op::SeqAttention { .. } => "seq_attention",
            Op::GraphAttention { .. } => "graph_attention",
            Op::CosineRows(..) => "cosine_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::SegmentLogSumExp { .. } => "segment_log_sum_exp",
            Op::SumAll(..) => "sum",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ConcatCols(a, b)
            | Op::CosineRows(a, b)
            | Op::RowBlend { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SumAll(a)
            | Op::GatherRows { x: a, .. }
            | Op::ScatterAddRows { x: a, .. }
            | Op::PickCols { x: a, .. }
            | Op::SegmentLogSumExp { x: a, .. }
            | Op::Reshape { x: a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SeqAttention { q, k, v, .. } | Op::GraphAttention { q, k, v, .. } => {
                vec![*q, *k, *v]
            }
        }
    }
}

/// Intermediate results a backward rule needs beyond input/output values.
#[derive(Clone, Debug)]
enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    saved: Saved,
    needs_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of the right shape when `v` is disconnected.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let value = tape.value(v);
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input. Gradients flow into it when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            saved: Saved::None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input (sets `requires_grad`).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Records a constant input that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.compute(&op, |v| &self.nodes[v.0].value)?;
        let value = value.ensure_finite(op.name())?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            saved,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Re-executes every recorded operation from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => self.compute(op, |v| &values[v.0])?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        self.record(Op::MatMul(a, b))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if self.value(row).len() != self.value(a).cols() {
            return Err(Error::shape(
                "add_row",
                format!("row of {} for width {}", self.value(row).len(), self.value(a).cols()),
            ));
        }
        self.record(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if self.value(row).len() != self.value(a).cols() {
            return Err(Error::shape(
                "mul_row",
                format!("row of {} for width {}", self.value(row).len(), self.value(a).cols()),
            ));
        }
        self.record(Op::MulRow(a, row))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        self.record(Op::GatherRows { x, index })
    }

    /// Output has `rows` rows; row `index[i]` accumulates row `i` of `x`.
    pub fn scatter_add_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        if index.len() != self.value(x).rows() || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", "index out of range"));
        }
        self.record(Op::ScatterAddRows { x, index, rows })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, _) = matrix_dims("concat_cols", self.value(a))?;
        let (rb, _) = matrix_dims("concat_cols", self.value(b))?;
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} vs {rb} rows")));
        }
        self.record(Op::ConcatCols(a, b))
    }

    /// Row `r` of the output is row `r` of `a` when `take_a[r]`, else of `b`.
    pub fn row_blend(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Result<Var> {
        check_same("row_blend", self.value(a), self.value(b))?;
        if take_a.len() != self.value(a).rows() {
            return Err(Error::shape("row_blend", "mask length"));
        }
        self.record(Op::RowBlend { a, b, take_a })
    }

    /// Multi-head scaled dot-product attention within consecutive blocks of
    /// `seq_len` rows. Keys whose `valid` flag is false get zero weight; a
    /// query with no valid key yields a zero row.
    pub fn seq_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        valid: Vec<bool>,
    ) -> Result<Var> {
        let qv = self.value(q);
        check_same("seq_attention", qv, self.value(k))?;
        check_same("seq_attention", qv, self.value(v))?;
        let (rows, cols) = matrix_dims("seq_attention", qv)?;
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || cols % heads != 0 {
            return Err(Error::shape("seq_attention", "block or head split"));
        }
        if valid.len() != rows {
            return Err(Error::shape("seq_attention", "valid mask length"));
        }
        self.record(Op::SeqAttention {
            q,
            k,
            v,
            seq_len,
            heads,
            valid,
        })
    }

    /// Destination-specific multi-head attention over `edges = (dst, src)`.
    /// Each destination's weights are a softmax over its incoming edges of
    /// `scale · ⟨q_dst, k_src⟩` per head; rows without edges are zero.
    pub fn graph_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let qv = self.value(q);
        check_same("graph_attention", qv, self.value(k))?;
        check_same("graph_attention", qv, self.value(v))?;
        let (rows, cols) = matrix_dims("graph_attention", qv)?;
        if heads == 0 || cols % heads != 0 {
            return Err(Error::shape("graph_attention", "head split"));
        }
        if edges.iter().any(|&(d, s)| d >= rows || s >= rows) {
            return Err(Error::shape("graph_attention", "edge endpoint out of range"));
        }
        self.record(Op::GraphAttention {
            q,
            k,
            v,
            heads,
            scale,
            edges: EdgeGroups::new(edges),
        })
    }

    /// Row-wise cosine similarity, shape `[rows×1]`. A zero-norm row gives 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("cosine_rows", self.value(a), self.value(b))?;
        self.record(Op::CosineRows(a, b))
    }

    /// Picks `x[i, index[i]]` into a `[rows×1]` column.
    pub fn pick_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() || index.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::shape("pick_cols", "index out of range"));
        }
        self.record(Op::PickCols { x, index })
    }

    /// Log-sum-exp over contiguous, nonempty segments of a flat input.
    /// `offsets` has one more entry than there are segments.
    pub fn segment_log_sum_exp(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&n)
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::shape("segment_log_sum_exp", "bad segment offsets"));
        }
        self.record(Op::SegmentLogSumExp { x, offsets })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", "element count"));
        }
        self.record(Op::Reshape { x, shape })
    }

    fn compute<'a>(
        &self,
        op: &Op,
        val: impl Fn(Var) -> &'a Tensor,
    ) -> Result<(Tensor, Saved)> {
        let plain = |shape: &[usize], data: Vec<f64>| -> Result<(Tensor, Saved)> {
            Ok((Tensor::new(shape.to_vec(), data)?, Saved::None))
        };
        match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => {
                let (a, b) = (val(*a), val(*b));
                plain(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
            }
            Op::Sub(a, b) => {
                let (a, b) = (val(*a), val(*b));
                plain(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                plain(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
            }
            Op::Scale(a, c) => {
                let a = val(*a);
                plain(a.shape(), a.data().iter().map(|x| x * c).collect())
            }
            Op::Square(a) => {
                let a = val(*a);
                plain(a.shape(), a.data().iter().map(|x| x * x).collect())
            }
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                plain(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            }
            Op::AddRow(a, r) => {
                let (a, r) = (val(*a), val(*r));
                let c = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + r.data()[i % c])
                    .collect();
                plain(a.shape(), data)
            }
            Op::MulRow(a, r) => {
                let (a, r) = (val(*a), val(*r));
                let c = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * r.data()[i % c])
                    .collect();
                plain(a.shape(), data)
            }
            Op::Gelu(a) => {
                let a = val(*a);
                plain(a.shape(), a.data().iter().map(|&x| kernels::gelu(x)).collect())
            }
            Op::SoftmaxRows(a) => {
                let a = val(*a);
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(a.cols()) {
                    kernels::softmax_in_place(row);
                }
                plain(a.shape(), out)
            }
            Op::LogSoftmaxRows(a) => {
                let a = val(*a);
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(a.cols()) {
                    let lse = kernels::log_sum_exp(row);
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                plain(a.shape(), out)
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let (y, xhat, inv_std) = kernels::layer_norm(
                    xv.data(),
                    val(*gain).data(),
                    val(*bias).data(),
                    xv.cols(),
                    *eps,
                );
                Ok((
                    Tensor::new(xv.shape().to_vec(), y)?,
                    Saved::LayerNorm { xhat, inv_std },
                ))
            }
            Op::GatherRows { x, index } => {
                let x = val(*x);
                let c = x.cols();
                let mut out = Vec::with_capacity(index.len() * c);
                for &i in index {
                    out.extend_from_slice(x.row(i));
                }
                plain(&[index.len(), c], out)
            }
            Op::ScatterAddRows { x, index, rows } => {
                let x = val(*x);
                let c = x.cols();
                let mut out = vec![0.0; rows * c];
                for (i, &dst) in index.iter().enumerate() {
                    for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                plain(&[*rows, c], out)
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let (ca, cb) = (a.cols(), b.cols());
                let mut out = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    out.extend_from_slice(a.row(r));
                    out.extend_from_slice(b.row(r));
                }
                plain(&[a.rows(), ca + cb], out)
            }
            Op::RowBlend { a, b, take_a } => {
                let (a, b) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(a.len());
                for (r, &t) in take_a.iter().enumerate() {
                    out.extend_from_slice(if t { a.row(r) } else { b.row(r) });
                }
                plain(a.shape(), out)
            }
            Op::SeqAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                valid,
            } => {
                let (q, k, v) = (val(*q), val(*k), val(*v));
                let (out, probs) = seq_attention_forward(q, k, v, *seq_len, *heads, valid);
                Ok((Tensor::new(q.shape().to_vec(), out)?, Saved::Probs(probs)))
            }
            Op::GraphAttention {
                q,
                k,
                v,
                heads,
                scale,
                edges,
            } => {
                let (q, k, v) = (val(*q), val(*k), val(*v));
                let (out, probs) = graph_attention_forward(q, k, v, *heads, *scale, edges);
                Ok((Tensor::new(q.shape().to_vec(), out)?, Saved::Probs(probs)))
            }
            Op::CosineRows(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let c = a.cols();
                let out = (0..a.rows())
                    .map(|r| cosine(&a.data()[r * c..(r + 1) * c], &b.data()[r * c..(r + 1) * c]).0)
                    .collect();
                plain(&[a.rows(), 1], out)
            }
            Op::PickCols { x, index } => {
                let x = val(*x);
                let out = index.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect();
                plain(&[index.len(), 1], out)
            }
            Op::SegmentLogSumExp { x, offsets } => {
                let x = val(*x);
                let out = offsets
                    .windows(2)
                    .map(|w| kernels::log_sum_exp(&x.data()[w[0]..w[1]]))
                    .collect::<Vec<_>>();
                plain(&[out.len(), 1], out)
            }
            Op::SumAll(a) => plain(&[1], vec![val(*a).data().iter().sum()]),
            Op::Reshape { x, shape } => plain(shape, val(*x).data().to_vec()),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += 2.0 * av[i] * g[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_bt_acc(g, bt.data(), da, m, k, n);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_at_acc(at.data(), g, db, m, k, n);
                }
            }
            Op::AddRow(a, r) => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(dr) = self.acc(grads, *r) {
                    for (i, x) in g.iter().enumerate() {
                        dr[i % c] += x;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let c = out.cols();
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                if let Some(da) = self.acc(grads, *a) {
                    for (i, x) in g.iter().enumerate() {
                        da[i] += x * rv[i % c];
                    }
                }
                if let Some(dr) = self.acc(grads, *r) {
                    for (i, x) in g.iter().enumerate() {
                        dr[i % c] += x * av[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let s = kernels::dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    unreachable!()
                };
                let c = out.cols();
                let gv = self.value(*gain).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..inv_std.len() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = kernels::dot(&dxhat, hrow) / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    for (i, x) in g.iter().enumerate() {
                        dg[i % c] += x * xhat[i];
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for (i, x) in g.iter().enumerate() {
                        db[i % c] += x;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let c = out.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ScatterAddRows { x, index, .. } => {
                let c = out.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &dst) in index.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = out.rows();
                if let Some(da) = self.acc(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut da[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for r in 0..rows {
                        add_into(
                            &mut db[r * cb..(r + 1) * cb],
                            &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                        );
                    }
                }
            }
            Op::RowBlend { a, b, take_a } => {
                let c = out.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, t)| **t) {
                        add_into(&mut da[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, t)| !**t) {
                        add_into(&mut db[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SeqAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                valid,
            } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!()
                };
                let (dq, dk, dv) = seq_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *seq_len,
                    *heads,
                    valid,
                    probs,
                    g,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = self.acc(grads, var) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::GraphAttention {
                q,
                k,
                v,
                heads,
                scale,
                edges,
            } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!()
                };
                let (dq, dk, dv) = graph_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    *scale,
                    edges,
                    probs,
                    g,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = self.acc(grads, var) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da_local = vec![0.0; av.len()];
                let mut db_local = vec![0.0; bv.len()];
                for r in 0..av.rows() {
                    let ar = &av.data()[r * c..(r + 1) * c];
                    let br = &bv.data()[r * c..(r + 1) * c];
                    let (cos, na, nb) = cosine(ar, br);
                    if na < COSINE_EPS || nb < COSINE_EPS {
                        continue;
                    }
                    for j in 0..c {
                        da_local[r * c + j] = g[r] * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                        db_local[r * c + j] = g[r] * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                    }
                }
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, &da_local);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, &db_local);
                }
            }
            Op::PickCols { x, index } => {
                let c = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &col) in index.iter().enumerate() {
                        dx[r * c + col] += g[r];
                    }
                }
            }
            Op::SegmentLogSumExp { x, offsets } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (s, w) in offsets.windows(2).enumerate() {
                        let lse = out.data()[s];
                        for j in w[0]..w[1] {
                            dx[j] += g[s] * (xv[j] - lse).exp();
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { x, .. } => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
            }
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

/// Returns `(cos, |a|, |b|)`; the cosine is 0 when either norm vanishes.
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (0.0, na, nb);
    }
    (kernels::dot(a, b) / (na * nb), na, nb)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn seq_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    heads: usize,
    valid: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let (rows, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = rows / seq_len;
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for a in 0..seq_len {
                let p0 = ((s * heads + h) * seq_len + a) * seq_len;
                let p = &mut probs[p0..p0 + seq_len];
                let qa = &q.row(base + a)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for b in 0..seq_len {
                    if valid[base + b] {
                        p[b] = scale * kernels::dot(qa, &k.row(base + b)[cols.clone()]);
                        max = max.max(p[b]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for b in 0..seq_len {
                    if valid[base + b] {
                        p[b] = (p[b] - max).exp();
                        sum += p[b];
                    }
                }
                let orow = &mut out[(base + a) * d + h * dh..(base + a) * d + (h + 1) * dh];
                for b in 0..seq_len {
                    if valid[base + b] {
                        p[b] /= sum;
                        let vb = &v.row(base + b)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vb) {
                            *o += p[b] * x;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn seq_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    heads: usize,
    valid: &[bool],
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = rows / seq_len;
    let (mut dq, mut dk, mut dv) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
    let mut dp = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let off = h * dh;
            for a in 0..seq_len {
                let p0 = ((s * heads + h) * seq_len + a) * seq_len;
                let p = &probs[p0..p0 + seq_len];
                let go = &g[(base + a) * d + off..(base + a) * d + off + dh];
                let mut weighted = 0.0;
                for b in 0..seq_len {
                    if !valid[base + b] {
                        continue;
                    }
                    let vb = &v.row(base + b)[off..off + dh];
                    dp[b] = kernels::dot(go, vb);
                    weighted += p[b] * dp[b];
                    let dvb = &mut dv[(base + b) * d + off..(base + b) * d + off + dh];
                    for (x, y) in dvb.iter_mut().zip(go) {
                        *x += p[b] * y;
                    }
                }
                let qa = &q.row(base + a)[off..off + dh];
                for b in 0..seq_len {
                    if !valid[base + b] {
                        continue;
                    }
                    let ds = p[b] * (dp[b] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kb = &k.row(base + b)[off..off + dh];
                    let dqa = &mut dq[(base + a) * d + off..(base + a) * d + off + dh];
                    for (x, y) in dqa.iter_mut().zip(kb) {
                        *x += ds * y;
                    }
                    let dkb = &mut dk[(base + b) * d + off..(base + b) * d + off + dh];
                    for (x, y) in dkb.iter_mut().zip(qa) {
                        *x += ds * y;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn graph_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    edges: &EdgeGroups,
) -> (Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let dh = d / heads;
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; edges.src.len() * heads];
    for (dst, range) in edges.groups() {
        for h in 0..heads {
            let off = h * dh;
            let qd = &q.row(dst)[off..off + dh];
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                let l = scale * kernels::dot(qd, &k.row(edges.src[e])[off..off + dh]);
                probs[e * heads + h] = l;
                max = max.max(l);
            }
            let mut sum = 0.0;
            for e in range.clone() {
                let p = (probs[e * heads + h] - max).exp();
                probs[e * heads + h] = p;
                sum += p;
            }
            let orow = &mut out[dst * d + off..dst * d + off + dh];
            for e in range.clone() {
                probs[e * heads + h] /= sum;
                let w = probs[e * heads + h];
                for (o, x) in orow.iter_mut().zip(&v.row(edges.src[e])[off..off + dh]) {
                    *o += w * x;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn graph_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    edges: &EdgeGroups,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let dh = d / heads;
    let n = q.len();
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut dp = Vec::new();
    for (dst, range) in edges.groups() {
        for h in 0..heads {
            let off = h * dh;
            let go = &g[dst * d + off..dst * d + off + dh];
            dp.clear();
            let mut weighted = 0.0;
            for e in range.clone() {
                let s = edges.src[e];
                let p = probs[e * heads + h];
                let x = kernels::dot(go, &v.row(s)[off..off + dh]);
                dp.push(x);
                weighted += p * x;
                for (t, y) in dv[s * d + off..s * d + off + dh].iter_mut().zip(go) {
                    *t += p * y;
                }
            }
            let qd = &q.row(dst)[off..off + dh];
            for (i, e) in range.clone().enumerate() {
                let s = edges.src[e];
                let ds = probs[e * heads + h] * (dp[i] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (t, y) in dq[dst * d + off..dst * d + off + dh]
                    .iter_mut()
                    .zip(&k.row(s)[off..off + dh])
                {
                    *t += ds * y;
                }
                for (t, y) in dk[s * d + off..s * d + off + dh].iter_mut().zip(qd) {
                    *t += ds * y;
                }
            }
        }
    }
    (dq, dk, dv)
}
