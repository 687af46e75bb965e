use std::collections::BTreeMap;

use super::{GradMap, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    Embedding(Var, Vec<usize>),
    ExpandRows(Var),
    ExpandCols(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    /// Per-element winning input index for a masked max over a list.
    MaskedMax(Vec<Var>, Vec<usize>),
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// An append-only record of tensor operations.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta.to_vec()),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Input ids of a node, in the order the op consumed them.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSums(a)
            | Op::Slice(a, _, _)
            | Op::Embedding(a, _)
            | Op::ExpandRows(a)
            | Op::ExpandCols(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::StraightThrough(a) => vec![*a],
            Op::Concat(xs, _) | Op::MaskedMax(xs, _) => xs.clone(),
        }
    }

    /// Register a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Record every tensor of `set` as a leaf. Leaves of a frozen set do not
    /// track gradients.
    pub fn bind(&mut self, set: &ParamSet) -> BTreeMap<String, Var> {
        let track = !set.is_frozen();
        set.iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.zero_grad();
                (name.clone(), self.leaf(t.with_requires_grad(track)))
            })
            .collect()
    }

    /// Gradients of bound leaves after [`Tape::backward`]; leaves the loss
    /// does not depend on get zeros.
    pub fn grads_of(&self, bound: &BTreeMap<String, Var>) -> GradMap {
        bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn push(&mut self, op: &'static str, value: Tensor, record: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value: value.with_requires_grad(rg),
            op: record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, record, &[a, b])
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        record: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, record, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("matmul")?;
        let (k2, m) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(n, m, matmul_raw(ta.data(), tb.data(), n, k, m))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("softmax")?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push("softmax", Tensor::matrix(r, c, data)?, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("log_softmax")?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(
            "log_softmax",
            Tensor::matrix(r, c, data)?,
            Op::LogSoftmax(a),
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::InvalidInput("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[r x c] -> [r x 1]` sums along each row.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("row_sums")?;
        let data = ta
            .data()
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().sum())
            .collect();
        self.push(
            "row_sums",
            Tensor::matrix(r, 1, data)?,
            Op::RowSums(a),
            &[a],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let (r0, c0) = self.value(first).dims2("concat")?;
        let out = match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2("concat")?;
                    if c != c0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = t.dims2("concat")?;
                    if r != r0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = vec![0.0; r0 * total];
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let src = self.value(p).data();
                    for i in 0..r0 {
                        data[i * total + off..i * total + off + w]
                            .copy_from_slice(&src[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Tensor::matrix(r0, total, data)?
            }
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("slice")?;
        let limit = if axis == Axis::Rows { r } else { c };
        if start >= end || end > limit {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let out = match axis {
            Axis::Rows => Tensor::matrix(w, c, ta.data()[start * c..end * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * w);
                for row in ta.data().chunks(c) {
                    data.extend_from_slice(&row[start..end]);
                }
                Tensor::matrix(r, w, data)?
            }
        };
        self.push("slice", out, Op::Slice(a, axis, start), &[a])
    }

    /// Gather rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = t.dims2("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of vocabulary of size {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::matrix(ids.len(), dim, data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding(table, ids.to_vec()),
            &[table],
        )
    }

    /// `[1 x c] -> [n x c]`.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("expand_rows")?;
        if r != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![1, c],
            });
        }
        let data = ta.data().repeat(n);
        self.push(
            "expand_rows",
            Tensor::matrix(n, c, data)?,
            Op::ExpandRows(a),
            &[a],
        )
    }

    /// `[r x 1] -> [r x n]`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("expand_cols")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![r, 1],
            });
        }
        let data = ta
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        self.push(
            "expand_cols",
            Tensor::matrix(r, n, data)?,
            Op::ExpandCols(a),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out =
            Tensor::new(shape.to_vec(), ta.data().to_vec()).map_err(|_| Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// `out[i] = a[i, cols[i]]`, shaped `[r x 1]`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("gather")?;
        if cols.len() != r {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: ta.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidInput(format!("gather column {bad} >= {c}")));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| ta.data()[i * c + j])
            .collect();
        self.push(
            "gather",
            Tensor::matrix(r, 1, data)?,
            Op::Gather(a, cols.to_vec()),
            &[a],
        )
    }

    /// Elementwise max over a list of equally shaped `[r x c]` tensors,
    /// where `valid[k][i]` says whether row `i` of input `k` takes part.
    /// Each row needs at least one valid input.
    pub fn masked_max(&mut self, parts: &[Var], valid: &[Vec<bool>]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("masked_max of zero tensors".into()))?;
        let (r, c) = self.value(first).dims2("masked_max")?;
        if valid.len() != parts.len() || valid.iter().any(|v| v.len() != r) {
            return Err(Error::InvalidInput(
                "masked_max validity table has wrong shape".into(),
            ));
        }
        let mut data = vec![f64::NEG_INFINITY; r * c];
        let mut winner = vec![usize::MAX; r * c];
        for (k, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            if t.shape() != [r, c] {
                return Err(mismatch("masked_max", self.value(first), t));
            }
            for i in 0..r {
                if !valid[k][i] {
                    continue;
                }
                for j in 0..c {
                    let v = t.data()[i * c + j];
                    if v > data[i * c + j] {
                        data[i * c + j] = v;
                        winner[i * c + j] = k;
                    }
                }
            }
        }
        if winner.contains(&usize::MAX) {
            return Err(Error::InvalidInput(
                "masked_max row with no valid input".into(),
            ));
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push(
            "masked_max",
            out,
            Op::MaskedMax(parts.to_vec(), winner),
            parts,
        )
    }

    /// Forward value is `1` where `a > 0.5` and `0` otherwise (a tie at 0.5
    /// drops); the backward pass is the identity, so gradients flow as if
    /// the soft value had been used.
    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "straight_through",
            a,
            |x| if x > 0.5 { 1.0 } else { 0.0 },
            Op::StraightThrough(a),
        )
    }

    /// Populate gradients of every tracked node with d(loss)/d(node).
    ///
    /// Calling this twice without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already populated; reset first".into(),
            ));
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.requires_grad() {
            return Err(Error::Backward(
                "loss does not depend on any tracked leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].value.set_grad(g);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clear all gradient buffers so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.backward_done = false;
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let send = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if self.requires_grad(v) {
                accumulate(&mut grads[v.0], &delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2("matmul")?;
                let (_, m) = tb.dims2("matmul")?;
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..k {
                            let brow = &tb.data()[j * m..(j + 1) * m];
                            let grow = &g[i * m..(i + 1) * m];
                            da[i * k + j] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for j in 0..k {
                            let aij = ta.data()[i * k + j];
                            if aij == 0.0 {
                                continue;
                            }
                            let dst = &mut db[j * m..(j + 1) * m];
                            dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += aij * gv);
                        }
                    }
                    send(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(db).map(|(x, y)| x * y).collect(), grads);
                send(*b, g.iter().zip(da).map(|(x, y)| x * y).collect(), grads);
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect(), grads),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                send(*a, g.to_vec(), grads)
            }
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect(),
                grads,
            ),
            Op::Tanh(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
                grads,
            ),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(gv, y)| gv * y).collect(), grads),
            Op::Log(a) => send(
                *a,
                g.iter().zip(self.data(*a)).map(|(gv, x)| gv / x).collect(),
                grads,
            ),
            Op::Abs(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| {
                        if *x > 0.0 {
                            *gv
                        } else if *x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                grads,
            ),
            Op::Softmax(a) => {
                let (_, c) = node.value.dims2("softmax")?;
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                send(*a, d, grads);
            }
            Op::LogSoftmax(a) => {
                let (_, c) = node.value.dims2("log_softmax")?;
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                send(*a, d, grads);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()], grads),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n], grads);
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).dims2("row_sums")?;
                let d = (0..r * c).map(|i| g[i / c]).collect();
                send(*a, d, grads);
            }
            Op::Concat(parts, axis) => {
                let (r, total) = node.value.dims2("concat")?;
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2("concat")?;
                    let d = match axis {
                        Axis::Rows => g[off * total..(off + pr) * total].to_vec(),
                        Axis::Cols => {
                            let mut d = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                d.extend_from_slice(&g[i * total + off..i * total + off + pc]);
                            }
                            d
                        }
                    };
                    off += if *axis == Axis::Rows { pr } else { pc };
                    send(p, d, grads);
                }
            }
            Op::Slice(a, axis, start) => {
                let (r, c) = self.value(*a).dims2("slice")?;
                let (_, w) = node.value.dims2("slice")?;
                let mut d = vec![0.0; r * c];
                match axis {
                    Axis::Rows => d[start * c..start * c + g.len()].copy_from_slice(g),
                    Axis::Cols => {
                        for i in 0..r {
                            d[i * c + start..i * c + start + w]
                                .copy_from_slice(&g[i * w..(i + 1) * w]);
                        }
                    }
                }
                send(*a, d, grads);
            }
            Op::Embedding(table, ids) => {
                let (v, dim) = self.value(*table).dims2("embedding")?;
                let mut d = vec![0.0; v * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id * dim..(id + 1) * dim];
                    dst.iter_mut()
                        .zip(&g[row * dim..(row + 1) * dim])
                        .for_each(|(x, y)| *x += y);
                }
                send(*table, d, grads);
            }
            Op::ExpandRows(a) => {
                let c = self.value(*a).numel();
                let mut d = vec![0.0; c];
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                send(*a, d, grads);
            }
            Op::ExpandCols(a) => {
                let (_, n) = node.value.dims2("expand_cols")?;
                send(*a, g.chunks(n).map(|row| row.iter().sum()).collect(), grads);
            }
            Op::Gather(a, cols) => {
                let (r, c) = self.value(*a).dims2("gather")?;
                let mut d = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                send(*a, d, grads);
            }
            Op::MaskedMax(parts, winner) => {
                let n = node.value.numel();
                for (k, &p) in parts.iter().enumerate() {
                    if !self.requires_grad(p) {
                        continue;
                    }
                    let d: Vec<f64> = (0..n)
                        .map(|e| if winner[e] == k { g[e] } else { 0.0 })
                        .collect();
                    send(p, d, grads);
                }
            }
        }
        Ok(())
    }
}

/// Row-major `[n x k] · [k x m]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(t: &mut Tape, r: usize, c: usize, d: &[f64], grad: bool) -> Var {
        let x = Tensor::matrix(r, c, d.to_vec()).unwrap();
        if grad {
            t.param(x)
        } else {
            t.constant(x)
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 1, &[0.0], false);
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.data(y), &[0.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 3, &[1.7, 1.7, 1.7], false);
        let y = t.softmax(x).unwrap();
        for v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [0.3, -1.2, 0.7, 1.9, 0.05, -0.4];
        let b = [1.1, -0.6, 0.2, 0.9, -1.5, 0.35];
        let mut expect = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let va = m(&mut t, 2, 3, &a, false);
        let vb = m(&mut t, 3, 2, &b, false);
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        for (x, y) in t.data(c).iter().zip(expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.0; 6], false);
        let b = m(&mut t, 2, 3, &[0.0; 6], false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = m(&mut t, 3, 2, &[0.0; 6], false);
        let err = t.add(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let a = m(&mut t, 1, 2, &[0.0, 1.0], false);
        assert!(matches!(t.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn linear_map_gradient_is_the_input() {
        let x = [0.5, -1.0, 2.0];
        let mut t = Tape::new();
        let w = m(&mut t, 1, 3, &[0.1, 0.2, 0.3], true);
        let xv = m(&mut t, 1, 3, &x, false);
        let p = t.mul(w, xv).unwrap();
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &x);
        assert!(t.grad(xv).is_none());
    }

    #[test]
    fn chain_rule_through_sigmoid_square() {
        let mut t = Tape::new();
        let w = m(&mut t, 1, 1, &[0.0], true);
        let s = t.sigmoid(w).unwrap();
        let sq = t.mul(s, s).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::new();
        assert!(t.backward(Var(0)).is_err());
        let w = m(&mut t, 1, 2, &[1.0, 2.0], true);
        assert!(matches!(t.backward(w), Err(Error::Backward(_))));
        let c = m(&mut t, 1, 1, &[1.0], false);
        let detached = t.scale(c, 2.0).unwrap();
        assert!(matches!(t.backward(detached), Err(Error::Backward(_))));
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
        t.reset_grads();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn straight_through_is_binary_forward_identity_backward() {
        let mut t = Tape::new();
        let p = m(&mut t, 1, 4, &[0.2, 0.5, 0.51, 0.9], true);
        let h = t.straight_through(p).unwrap();
        assert_eq!(t.data(h), &[0.0, 0.0, 1.0, 1.0]);
        let w = m(&mut t, 1, 4, &[1.0, 2.0, 3.0, 4.0], false);
        let prod = t.mul(h, w).unwrap();
        let loss = t.sum(prod).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut t = Tape::new();
        let tab = m(&mut t, 3, 2, &[0.0; 6], true);
        assert!(t.embedding(tab, &[0, 3]).is_err());
        let e = t.embedding(tab, &[2, 2]).unwrap();
        assert_eq!(t.shape(e), &[2, 2]);
    }

    #[test]
    fn node_inputs_precede_outputs() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0], true);
        let b = t.tanh(a).unwrap();
        let c = t.matmul(a, b).unwrap();
        let d = t.concat(&[a, b, c], Axis::Cols).unwrap();
        let e = t.sum(d).unwrap();
        for i in 0..t.len() {
            for inp in t.inputs(Var(i)) {
                assert!(inp.index() < i);
            }
        }
        t.backward(e).unwrap();
    }
}
