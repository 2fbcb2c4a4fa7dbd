//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op in call order. [`Tape::backward`] walks the
//! record in exact reverse order, accumulating gradients by summation, and
//! then clears the tape. Tapes are single-threaded; run one tape per worker
//! with shared read-only parameter snapshots.

use super::tensor::matmul_into;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    RowSums(Var),
    AddColumn(Var, Var),
    ScaleRows(Var, Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation record plus the values it produced.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

#[inline]
fn bcast(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Binary(_, a, b)
            | Op::AddColumn(a, b)
            | Op::ScaleRows(a, b) => self.rg(*a) || self.rg(*b),
            Op::Transpose(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Powf(a, _)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::Gather(a, _) => self.rg(*a),
            Op::Concat(vs) => vs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("argument {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("argument {bad} (clamp before sqrt)"),
                    });
                }
                x.map(f64::sqrt)
            }
        };
        self.push(Op::Unary(kind, a), out, unary_name(kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// Elementwise binary op with same-shape or scalar broadcasting.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = binary_name(kind);
        let (x, y) = (self.value(a), self.value(b));
        let shape = same_or_scalar(name, x, y)?;
        let n: usize = shape.iter().product();
        if kind == Binary::Div && y.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data = (0..n)
            .map(|i| {
                let (p, q) = (bcast(x, i), bcast(y, i));
                match kind {
                    Binary::Add => p + q,
                    Binary::Sub => p - q,
                    Binary::Mul => p * q,
                    Binary::Div => p / q,
                }
            })
            .collect();
        self.push(Op::Binary(kind, a, b), Tensor::new(shape, data)?, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), out, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::Offset(a), out, "add_scalar")
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                detail: "negative base".into(),
            });
        }
        let out = x.map(|v| v.powf(p));
        self.push(Op::Powf(a, p), out, "powf")
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out, "clamp")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(Op::LogSoftmaxRows(a), out, "log_softmax_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Sums each row of an m×n matrix into a length-m vector.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        let out: Vec<f64> = x.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        self.push(Op::RowSums(a), Tensor::vector(out), "row_sums")
    }

    /// Adds `col[i]` to every entry of row `i` (bias over time frames).
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if x.rows() != c.numel() {
            return Err(Error::dim(
                "add_column",
                format!("{:?} + column {:?}", x.shape(), c.shape()),
            ));
        }
        let n = x.cols();
        let mut out = x.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let b = c.data()[r];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(Op::AddColumn(a, col), out, "add_column")
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, f) = (self.value(a), self.value(s));
        if x.rows() != f.numel() {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} by {:?}", x.shape(), f.shape()),
            ));
        }
        let n = x.cols();
        let mut out = x.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let k = f.data()[r];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.push(Op::ScaleRows(a, s), out, "scale_rows")
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::dim("gather", format!("index {bad} out of {}", x.numel())));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Gather(a, index), out, "gather")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        self.gather(a, (0..n).collect(), shape)
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, vec![i], &[])
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if r >= m {
            return Err(Error::dim("row", format!("row {r} of {m}")));
        }
        self.gather(a, (r * n..(r + 1) * n).collect(), &[n])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("[{start},{end}) of {n}")));
        }
        let w = end - start;
        let idx = (0..m)
            .flat_map(|r| (start..end).map(move |c| r * n + c))
            .collect();
        self.gather(a, idx, &[m, w])
    }

    /// Concatenates flattened inputs into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), "concat")
    }

    /// Stacks equal-length vectors as rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = rows.first().map(|r| self.value(*r).numel()).unwrap_or(0);
        if rows.iter().any(|r| self.value(*r).numel() != n) {
            return Err(Error::dim("stack_rows", "rows differ in length"));
        }
        let flat = self.concat(rows)?;
        self.reshape(flat, &[rows.len(), n])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|p| self.value(*p).rows()).unwrap_or(0);
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let flat = self.concat(parts)?;
        let mut offsets = Vec::with_capacity(parts.len());
        let mut acc = 0;
        for w in &widths {
            offsets.push(acc);
            acc += m * w;
        }
        let mut idx = Vec::with_capacity(m * total);
        for r in 0..m {
            for (k, w) in widths.iter().enumerate() {
                idx.extend((0..*w).map(|c| offsets[k] + r * w + c));
            }
        }
        self.gather(flat, idx, &[m, total])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Runs reverse accumulation from the scalar `loss` and resets the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        self.nodes.clear();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign_scaled(&delta, 1.0),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G Bᵀ
                    let bt = bv.transpose();
                    let mut out = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut out, m, n, k);
                    acc(*a, Tensor::new(av.shape().to_vec(), out).expect("shape"));
                }
                if self.rg(*b) {
                    // dB = Aᵀ G
                    let at = av.transpose();
                    let mut out = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut out, k, m, n);
                    acc(*b, Tensor::new(bv.shape().to_vec(), out).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(vec![g.rows(), g.cols()], g.data().to_vec())
                    .expect("shape")
                    .transpose();
                let shape = self.shape(*a).to_vec();
                acc(*a, gt.reshape(&shape).expect("shape"));
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let d: Vec<f64> = (0..x.numel())
                    .map(|i| {
                        let (xi, yi, gi) = (x.data()[i], y.data()[i], g.data()[i]);
                        gi * match kind {
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Sqrt => 0.5 / yi,
                        }
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::Binary(kind, a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let n = g.numel();
                let mut ga = vec![0.0; x.numel()];
                let mut gb = vec![0.0; z.numel()];
                let ia = |i: usize| if x.numel() == 1 { 0 } else { i };
                let ib = |i: usize| if z.numel() == 1 { 0 } else { i };
                for i in 0..n {
                    let (p, q, gi) = (bcast(x, i), bcast(z, i), g.data()[i]);
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * q, gi * p),
                        Binary::Div => (gi / q, -gi * p / (q * q)),
                    };
                    ga[ia(i)] += da;
                    gb[ib(i)] += db;
                }
                acc(*a, Tensor::new(x.shape().to_vec(), ga).expect("shape"));
                acc(*b, Tensor::new(z.shape().to_vec(), gb).expect("shape"));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| {
                        if *p == 0.0 {
                            0.0
                        } else {
                            gi * p * xi.powf(p - 1.0)
                        }
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi < *lo || xi > *hi { 0.0 } else { gi })
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::LogSoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for c in 0..n {
                        d[r * n + c] = gr[c] - yr[c].exp() * s;
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, Tensor::filled(&shape, g.item()));
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let n = x.cols();
                let d = (0..x.numel()).map(|i| g.data()[i / n]).collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::AddColumn(a, col) => {
                acc(*a, g.clone());
                if self.rg(*col) {
                    let n = g.cols();
                    let d: Vec<f64> = g.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
                    let shape = self.shape(*col).to_vec();
                    acc(*col, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::ScaleRows(a, s) => {
                let (x, f) = (self.value(*a), self.value(*s));
                let n = x.cols();
                if self.rg(*a) {
                    let d = (0..x.numel()).map(|i| g.data()[i] * f.data()[i / n]).collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
                }
                if self.rg(*s) {
                    let mut d = vec![0.0; f.numel()];
                    for i in 0..x.numel() {
                        d[i / n] += g.data()[i] * x.data()[i];
                    }
                    acc(*s, Tensor::new(f.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Gather(a, index) => {
                let shape = self.shape(*a).to_vec();
                let mut d = Tensor::zeros(&shape);
                let dd = d.data_mut();
                for (o, &i) in index.iter().enumerate() {
                    dd[i] += g.data()[o];
                }
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let len: usize = shape.iter().product();
                    let piece = g.data()[off..off + len].to_vec();
                    off += len;
                    acc(*p, Tensor::new(shape, piece).expect("shape"));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_name(k: Unary) -> &'static str {
    match k {
        Unary::Relu => "relu",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Sqrt => "sqrt",
    }
}

fn binary_name(k: Binary) -> &'static str {
    match k {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}
