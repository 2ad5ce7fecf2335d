//! Wengert tape: ops recorded during the forward pass, replayed in reverse.
//!
//! The op set is fixed to what the pipeline losses need: matrix products,
//! bias add, elementwise arithmetic, ReLU/log/exp, row softmax and
//! log-softmax with temperature, L2 row normalization, embedding lookup,
//! row/full reductions, per-row column gathers and a dot product. No
//! broadcasting beyond bias-add; shapes are checked at record time.

use super::{softmax_slice, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// a (m×k) times b^T (k×n), with b stored n×k.
    MatMulNT { a: Var, b: Var },
    AddBias { m: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Relu { x: Var },
    Log { x: Var },
    Exp { x: Var },
    SoftmaxRows { x: Var, temp: f64 },
    LogSoftmaxRows { x: Var, temp: f64 },
    NormalizeRows { x: Var },
    /// Row i of `m` scaled by `s[i]`.
    ScaleRows { m: Var, s: Var },
    Embed { table: Var, indices: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
    RowSum { x: Var },
    /// out[i] = m[i, cols[i]].
    GatherCols { m: Var, cols: Vec<usize> },
    /// out[i][j] = m[i, cols[i*width+j]].
    SelectCols { m: Var, cols: Vec<usize>, width: usize },
    DotVec { a: Var, b: Var },
    ClampMin { x: Var, lo: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True if a gradient can flow from this node back to a parameter.
    needs_grad: bool,
}

/// Records a single forward computation and computes gradients for it.
///
/// Single-threaded by construction; values are snapshotted at registration
/// so later mutation of the source tensors cannot alter the tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), done: false }
    }

    /// Register a trainable leaf. The data is copied onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), true)
    }

    /// Register a constant leaf: no gradient is ever accumulated for it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; zeros if the loss
    /// does not reach `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.id].value.shape().to_vec();
        match &self.grads[v.id] {
            Some(g) => Tensor::from_vec(&shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var { id }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    // ---- forward ops ----------------------------------------------------

    /// (m×k) @ (k×n) -> m×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.val(a).rows(), self.val(a).cols());
        let (k2, n) = (self.val(b).rows(), self.val(b).cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_impl(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, Tensor::from_vec(&[m, n], out).unwrap(), needs)
    }

    /// (m×k) @ (n×k)^T -> m×n.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.val(a).rows(), self.val(a).cols());
        let (n, k2) = (self.val(b).rows(), self.val(b).cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += ad[i * k + l] * bd[j * k + l];
                }
                out[i * n + j] = acc;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT { a, b }, Tensor::from_vec(&[m, n], out).unwrap(), needs)
    }

    /// Add a length-n bias vector to every row of an m×n matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Var {
        let (r, c) = (self.val(m).rows(), self.val(m).cols());
        assert_eq!(self.val(bias).numel(), c, "bias length");
        let bd = self.val(bias).data().to_vec();
        let mut out = self.val(m).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bd[j];
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        let shape = self.val(m).shape().to_vec();
        self.push(Op::AddBias { m, bias }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shapes");
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.val(a).shape().to_vec();
        self.push(Op::Add { a, b }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shapes");
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.val(a).shape().to_vec();
        self.push(Op::Mul { a, b }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::Scale { x, c }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v + c).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::AddConst { x }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::Relu { x }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v.ln()).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::Log { x }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v.exp()).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::Exp { x }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    /// Row-wise softmax of x / temp.
    pub fn softmax_rows(&mut self, x: Var, temp: f64) -> Var {
        assert!(temp > 0.0, "softmax temperature must be > 0");
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_slice(self.val(x).row(i), temp, &mut out[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::SoftmaxRows { x, temp }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    /// Row-wise log-softmax of x / temp (stable; avoids log of underflowed
    /// probabilities).
    pub fn log_softmax_rows(&mut self, x: Var, temp: f64) -> Var {
        assert!(temp > 0.0, "log-softmax temperature must be > 0");
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        let xd = self.val(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| ((v - max) / temp).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = (row[j] - max) / temp - lse;
            }
        }
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::LogSoftmaxRows { x, temp }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    /// L2-normalize every row. Errors on a zero-norm row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        let xd = self.val(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "cannot L2-normalize zero row {i}"
                )));
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(Op::NormalizeRows { x }, Tensor::from_vec(&shape, out).unwrap(), needs))
    }

    /// Scale row i of an r×c matrix by s[i].
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Var {
        let (r, c) = (self.val(m).rows(), self.val(m).cols());
        assert_eq!(self.val(s).numel(), r, "scale_rows vector length");
        let sd = self.val(s).data().to_vec();
        let mut out = self.val(m).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= sd[i];
            }
        }
        let needs = self.needs(m) || self.needs(s);
        let shape = self.val(m).shape().to_vec();
        self.push(Op::ScaleRows { m, s }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    /// Gather rows of an embedding table: out[b] = table[indices[b]].
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Var {
        let (k, d) = (self.val(table).rows(), self.val(table).cols());
        assert!(indices.iter().all(|&i| i < k), "embedding index out of range");
        let td = self.val(table).data();
        let mut out = vec![0.0; indices.len() * d];
        for (b, &idx) in indices.iter().enumerate() {
            out[b * d..(b + 1) * d].copy_from_slice(&td[idx * d..(idx + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            Op::Embed { table, indices: indices.to_vec() },
            Tensor::from_vec(&[indices.len(), d], out).unwrap(),
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x).numel() as f64;
        let s: f64 = self.val(x).data().iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), needs)
    }

    /// Sum each row of an r×c matrix into a length-r vector.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        let xd = self.val(x).data();
        let out: Vec<f64> = (0..r).map(|i| xd[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(x);
        self.push(Op::RowSum { x }, Tensor::from_vec(&[r], out).unwrap(), needs)
    }

    /// out[i] = m[i, cols[i]].
    pub fn gather_cols(&mut self, m: Var, cols: &[usize]) -> Var {
        let (r, c) = (self.val(m).rows(), self.val(m).cols());
        assert_eq!(cols.len(), r, "gather_cols index length");
        assert!(cols.iter().all(|&j| j < c), "gather_cols index out of range");
        let md = self.val(m).data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| md[i * c + j]).collect();
        let needs = self.needs(m);
        self.push(
            Op::GatherCols { m, cols: cols.to_vec() },
            Tensor::from_vec(&[r], out).unwrap(),
            needs,
        )
    }

    /// Per-row column selection: out is r×width with
    /// out[i][j] = m[i, cols[i*width + j]].
    pub fn select_cols(&mut self, m: Var, cols: &[usize], width: usize) -> Var {
        let (r, c) = (self.val(m).rows(), self.val(m).cols());
        assert_eq!(cols.len(), r * width, "select_cols index length");
        assert!(cols.iter().all(|&j| j < c), "select_cols index out of range");
        let md = self.val(m).data();
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            for j in 0..width {
                out[i * width + j] = md[i * c + cols[i * width + j]];
            }
        }
        let needs = self.needs(m);
        self.push(
            Op::SelectCols { m, cols: cols.to_vec(), width },
            Tensor::from_vec(&[r, width], out).unwrap(),
            needs,
        )
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).numel(), self.val(b).numel(), "dot lengths");
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::DotVec { a, b }, Tensor::scalar(s), needs)
    }

    /// Elementwise max(x, lo). Gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|v| v.max(lo)).collect();
        let needs = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        self.push(Op::ClampMin { x, lo }, Tensor::from_vec(&shape, out).unwrap(), needs)
    }

    // ---- composites ------------------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let nx = self.neg(x);
        self.add_const(nx, 1.0)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Every parameter the loss reaches gets
    /// a populated gradient; unreachable parameters read back as zeros.
    /// Deterministic: the same tape always produces bitwise-identical grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.id >= self.nodes.len() {
            return Err(Error::InvalidState("loss var is not on this tape".to_string()));
        }
        if !self.nodes[loss.id].value.is_scalar() {
            return Err(Error::InvalidState(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        if self.done {
            return Err(Error::InvalidState("backward already ran on this tape".to_string()));
        }
        self.done = true;
        self.grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(up) = self.grads[id].clone() else { continue };
            let op = self.nodes[id].op.clone();
            self.backprop(id, &op, &up);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.id].needs_grad {
            return;
        }
        match &mut self.grads[v.id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[v.id] = Some(contrib.to_vec()),
        }
    }

    fn backprop(&mut self, out_id: usize, op: &Op, up: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.val(*a).rows(), self.val(*a).cols());
                let n = self.val(*b).cols();
                if self.needs(*a) {
                    // dA = dY @ B^T
                    let bd = self.val(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                da[i * k + l] += u * bd[l * n + j];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ dY
                    let ad = self.val(*a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let av = ad[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[l * n + j] += av * up[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.val(*a).rows(), self.val(*a).cols());
                let n = self.val(*b).rows();
                if self.needs(*a) {
                    // dA = dY @ B  (dY m×n, B n×k)
                    let bd = self.val(*b).data();
                    let mut da = vec![0.0; m * k];
                    matmul_impl(up, bd, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = dY^T @ A  (n×m @ m×k)
                    let ad = self.val(*a).data();
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                db[j * k + l] += u * ad[i * k + l];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBias { m, bias } => {
                let (r, c) = (self.val(*m).rows(), self.val(*m).cols());
                self.accumulate(*m, up);
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += up[i * c + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, up);
                self.accumulate(*b, up);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> =
                        up.iter().zip(self.val(*b).data()).map(|(u, y)| u * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> =
                        up.iter().zip(self.val(*a).data()).map(|(u, x)| u * x).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = up.iter().map(|u| u * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::AddConst { x } => self.accumulate(*x, up),
            Op::Relu { x } => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> =
                    up.iter().zip(self.val(*x).data()).map(|(u, v)| u / v).collect();
                self.accumulate(*x, &dx);
            }
            Op::Exp { x } => {
                let yd = self.nodes[out_id].value.data();
                let dx: Vec<f64> = up.iter().zip(yd).map(|(u, y)| u * y).collect();
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x, temp } => {
                let (r, c) = (self.val(*x).rows(), self.val(*x).cols());
                let yd = self.nodes[out_id].value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dot: f64 =
                        (0..c).map(|j| up[base + j] * yd[base + j]).sum();
                    for j in 0..c {
                        dx[base + j] = yd[base + j] * (up[base + j] - dot) / temp;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LogSoftmaxRows { x, temp } => {
                let (r, c) = (self.val(*x).rows(), self.val(*x).cols());
                let yd = self.nodes[out_id].value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let usum: f64 = up[base..base + c].iter().sum();
                    for j in 0..c {
                        let p = yd[base + j].exp();
                        dx[base + j] = (up[base + j] - p * usum) / temp;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::NormalizeRows { x } => {
                let (r, c) = (self.val(*x).rows(), self.val(*x).cols());
                let xd = self.val(*x).data();
                let yd = self.nodes[out_id].value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let norm = xd[base..base + c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..c).map(|j| up[base + j] * yd[base + j]).sum();
                    for j in 0..c {
                        dx[base + j] = (up[base + j] - yd[base + j] * dot) / norm;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::ScaleRows { m, s } => {
                let (r, c) = (self.val(*m).rows(), self.val(*m).cols());
                if self.needs(*m) {
                    let sd = self.val(*s).data();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = up[i * c + j] * sd[i];
                        }
                    }
                    self.accumulate(*m, &dm);
                }
                if self.needs(*s) {
                    let md = self.val(*m).data();
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            ds[i] += up[i * c + j] * md[i * c + j];
                        }
                    }
                    self.accumulate(*s, &ds);
                }
            }
            Op::Embed { table, indices } => {
                let (k, d) = (self.val(*table).rows(), self.val(*table).cols());
                let mut dt = vec![0.0; k * d];
                for (b, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += up[b * d + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::SumAll { x } => {
                let dx = vec![up[0]; self.val(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.val(*x).numel();
                let dx = vec![up[0] / n as f64; n];
                self.accumulate(*x, &dx);
            }
            Op::RowSum { x } => {
                let (r, c) = (self.val(*x).rows(), self.val(*x).cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = up[i];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::GatherCols { m, cols } => {
                let (r, c) = (self.val(*m).rows(), self.val(*m).cols());
                let mut dm = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    dm[i * c + j] += up[i];
                }
                self.accumulate(*m, &dm);
            }
            Op::SelectCols { m, cols, width } => {
                let (r, c) = (self.val(*m).rows(), self.val(*m).cols());
                let mut dm = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*width {
                        dm[i * c + cols[i * width + j]] += up[i * width + j];
                    }
                }
                self.accumulate(*m, &dm);
            }
            Op::DotVec { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = self.val(*b).data().iter().map(|v| v * up[0]).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = self.val(*a).data().iter().map(|v| v * up[0]).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::ClampMin { x, lo } => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(u, &v)| if v > *lo { *u } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
        }
    }
}

/// out (m×n) += a (m×k) @ b (k×n); out must be zeroed by the caller.
fn matmul_impl(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
