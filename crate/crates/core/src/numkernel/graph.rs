//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and a reverse sweep visits every node after all of its
//! consumers. Each op validates shapes and trips [`KernelError::NumericFault`]
//! as soon as a non-finite value appears.

use super::tensor::{gemm, Tensor};
use super::KernelError;

type Result<T> = std::result::Result<T, KernelError>;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows forming one causal sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Elementwise add; the right operand may be a `1 x c` row broadcast over rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SqDist(Var, Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        /// Attention weights per (segment, head), each `len x len` row-major.
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward evaluation and its tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros for constants and
    /// nodes the loss does not depend on.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NumericFault(format!("non-finite value produced by {what}")))
    }
}

fn shape_err(msg: String) -> KernelError {
    KernelError::Shape(msg)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary_shapes(&self, a: Var, b: Var, allow_broadcast: bool, name: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb || (allow_broadcast && sb[0] == 1 && sb[1] == sa[1]) {
            Ok(())
        } else {
            Err(shape_err(format!("{name}: {sa:?} vs {sb:?}")))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let cols = ta.cols();
        let mut out = ta.clone();
        let bd = tb.data();
        let broadcast = tb.rows() == 1 && ta.rows() != 1;
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let bv = if broadcast { bd[i % cols] } else { bd[i] };
            *o = f(*o, bv);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, true, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, true, "sub")?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, false, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg, "softmax")
    }

    /// Row-wise layer normalisation with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, cols] {
                return Err(shape_err(format!(
                    "layer_norm parameter {:?} for {} columns",
                    self.value(p).shape(),
                    cols
                )));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let od = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                od[c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg, "layer_norm")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= ta.rows() {
                return Err(shape_err(format!("gather row {} of {}", i, ta.rows())));
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::new(idx.len(), cols, data)?;
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err(format!("concat_rows: {} vs {} columns", t.cols(), cols)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_shapes(pred, target, false, "mse")?;
        let tp = self.value(pred);
        if tp.is_empty() {
            return Err(shape_err("mse of empty tensor".into()));
        }
        let tt = self.value(target);
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let out = Tensor::scalar(s / tp.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        self.push(out, Op::Mse(pred, target), rg, "mse")
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows || rows == 0 {
            return Err(shape_err(format!("cross_entropy: {} targets for {} rows", targets.len(), rows)));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &k) in targets.iter().enumerate() {
            if k >= cols {
                return Err(shape_err(format!("cross_entropy target {k} >= {cols} classes")));
            }
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[k];
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(logits);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg, "cross_entropy")
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.cols() != tb.cols() {
            return Err(shape_err(format!("sq_dist: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for i in 0..ta.rows() {
            let ai = ta.row_slice(i);
            for j in 0..tb.rows() {
                let bj = tb.row_slice(j);
                out.data_mut()[i * tb.rows() + j] =
                    ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::SqDist(a, b), rg, "sq_dist")
    }

    /// Multi-head scaled dot-product attention restricted to earlier or equal
    /// positions within each segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let [rows, dim] = tq.shape();
        if tk.shape() != [rows, dim] || tv.shape() != [rows, dim] {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered {
                return Err(shape_err("attention segments must tile the rows in order".into()));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(shape_err(format!("segments cover {covered} of {rows} rows")));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, dim);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for s in segments {
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; s.len * s.len];
                for i in 0..s.len {
                    let qi = &qd[(s.start + i) * dim + off..(s.start + i) * dim + off + dh];
                    let prow = &mut p[i * s.len..i * s.len + i + 1];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(s.start + j) * dim + off..(s.start + j) * dim + off + dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out.data_mut()[(s.start + i) * dim + off..(s.start + i) * dim + off + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(s.start + j) * dim + off..(s.start + j) * dim + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::CausalAttention { q, k, v, heads, segments: segments.to_vec(), probs };
        self.push(out, op, rg, "causal_attention")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<[usize; 2]> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.0] != [1, 1] {
            return Err(KernelError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            check_finite(&g, "backward")?;
            grads[idx] = Some(g);
        }
        // Constants report zeros rather than whatever flowed into them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(g, false, tb, true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(ta, true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                let tb = self.value(*b);
                if tb.shape() == g.shape() {
                    let mut gb = g.clone();
                    gb.scale_in_place(sign);
                    acc(*b, gb);
                } else {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(1, cols);
                    for row in g.data().chunks(cols) {
                        for (o, x) in gb.data_mut().iter_mut().zip(row) {
                            *o += sign * x;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                for (o, x) in ga.data_mut().iter_mut().zip(tb.data()) {
                    *o *= x;
                }
                let mut gb = g.clone();
                for (o, x) in gb.data_mut().iter_mut().zip(ta.data()) {
                    *o *= x;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale_in_place(*s);
                acc(*a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (o, x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *x <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, yv) in gr.iter_mut().zip(yr) {
                        *o = yv * (*o - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = g.cols();
                let gm = self.value(*gamma).data();
                let mut gg = Tensor::zeros(1, cols);
                let mut gbeta = Tensor::zeros(1, cols);
                let mut gx = Tensor::zeros(g.rows(), cols);
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        gg.data_mut()[c] += gr[c] * hr[c];
                        gbeta.data_mut()[c] += gr[c];
                        let dh = gr[c] * gm[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let n = cols as f64;
                    let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let dh = gr[c] * gm[c];
                        out[c] = rstd[r] * (dh - sum_dh / n - hr[c] * sum_dh_h / n);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row_slice(r);
                    for (o, x) in ga.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    let data = g.data()[row * cols..(row + n) * cols].to_vec();
                    acc(p, Tensor::new(n, cols, data)?);
                    row += n;
                }
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.len() as f64;
                acc(*a, Tensor::filled(ta.rows(), ta.cols(), v));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let k = 2.0 * g.item() / tp.len() as f64;
                let mut gp = tp.clone();
                for (o, x) in gp.data_mut().iter_mut().zip(tt.data()) {
                    *o = k * (*o - x);
                }
                let mut gt = gp.clone();
                gt.scale_in_place(-1.0);
                acc(*p, gp);
                acc(*t, gt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).cols();
                let rows = targets.len();
                let k = g.item() / rows as f64;
                let mut gl = Tensor::new(rows, cols, probs.clone())?;
                for (r, &t) in targets.iter().enumerate() {
                    gl.data_mut()[r * cols + t] -= 1.0;
                }
                gl.scale_in_place(k);
                acc(*logits, gl);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                let mut gb = Tensor::zeros(tb.rows(), cols);
                for i in 0..ta.rows() {
                    for j in 0..tb.rows() {
                        let w = 2.0 * g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            let diff = ta.get(i, c) - tb.get(j, c);
                            ga.data_mut()[i * cols + c] += w * diff;
                            gb.data_mut()[j * cols + c] -= w * diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::CausalAttention { q, k, v, heads, segments, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let [rows, dim] = tq.shape();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(rows, dim);
                let mut gk = Tensor::zeros(rows, dim);
                let mut gv = Tensor::zeros(rows, dim);
                let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
                let mut dp = Vec::new();
                for (si, s) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let off = h * dh;
                        let at = |r: usize| (s.start + r) * dim + off;
                        for i in 0..s.len {
                            let gi = &gd[at(i)..at(i) + dh];
                            dp.clear();
                            // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                            for j in 0..=i {
                                let pij = p[i * s.len + j];
                                let vj = &vd[at(j)..at(j) + dh];
                                dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                let gvj = &mut gv.data_mut()[at(j)..at(j) + dh];
                                for (o, x) in gvj.iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                            let dot: f64 = (0..=i).map(|j| dp[j] * p[i * s.len + j]).sum();
                            let qi = &qd[at(i)..at(i) + dh];
                            for j in 0..=i {
                                let ds = p[i * s.len + j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[at(j)..at(j) + dh];
                                let gqi = &mut gq.data_mut()[at(i)..at(i) + dh];
                                for (o, x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk.data_mut()[at(j)..at(j) + dh];
                                for (o, x) in gkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
