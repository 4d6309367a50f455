//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node whose inputs were appended before it, so the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LogSoftmax(Var, Option<Vec<bool>>),
    L2Normalize(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape it came from.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape).expect("node shape"),
        }
    }
}

/// Broadcasting mode of a binary elementwise op.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A tracked leaf; gradients flow to it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(a).is_scalar() {
            Ok(Bcast::LeftScalar)
        } else if self.value(b).is_scalar() {
            Ok(Bcast::RightScalar)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Bcast::Same => (
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::LeftScalar => {
                let x = va.data()[0];
                (
                    vb.shape().to_vec(),
                    vb.data().iter().map(|&y| f(x, y)).collect(),
                )
            }
            Bcast::RightScalar => {
                let y = vb.data()[0];
                (
                    va.shape().to_vec(),
                    va.data().iter().map(|&x| f(x, y)).collect(),
                )
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `x[n,d] + bias[d]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vec![n, d],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v <= 0.0 { 0.0 } else { v });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&v) = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v.is_nan() || v <= 0.0)
        {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Log(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, d) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[rows, d], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let src = self.value(x);
        let data: Vec<f64> = idx
            .iter()
            .flat_map(|&i| src.row(i).iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], data)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.log_softmax_impl(x, None)
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked-out
    /// entries are 0 in the output and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_log_softmax",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        self.log_softmax_impl(x, Some(mask.to_vec()))
    }

    fn log_softmax_impl(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let active = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| active(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if (0..c).any(|j| active(j) && row[j].is_nan()) {
                (0..c)
                    .filter(|&j| active(j))
                    .for_each(|j| out[i * c + j] = f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max
                + (0..c)
                    .filter(|&j| active(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..c).filter(|&j| active(j)) {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::LogSoftmax(x, mask), rg))
    }

    /// Divide each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract(format!("eps must be positive, got {eps}")));
        }
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row_norm(row).max(eps);
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::L2Normalize(x, eps), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let mode = self.bcast("", *a, *b).expect("checked in forward");
                let full = g.to_vec();
                let total: f64 = g.iter().sum();
                match mode {
                    Bcast::Same => {
                        acc(*a, full.clone());
                        acc(*b, full.iter().map(|x| sign * x).collect());
                    }
                    Bcast::LeftScalar => {
                        acc(*a, vec![total]);
                        acc(*b, full.iter().map(|x| sign * x).collect());
                    }
                    Bcast::RightScalar => {
                        acc(*a, full);
                        acc(*b, vec![sign * total]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let mode = self.bcast("", *a, *b).expect("checked in forward");
                let (va, vb) = (val(*a), val(*b));
                match mode {
                    Bcast::Same => {
                        acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                        acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                    Bcast::LeftScalar => {
                        let x = va[0];
                        acc(*a, vec![g.iter().zip(vb).map(|(g, y)| g * y).sum()]);
                        acc(*b, g.iter().map(|g| g * x).collect());
                    }
                    Bcast::RightScalar => {
                        let y = vb[0];
                        acc(*a, g.iter().map(|g| g * y).collect());
                        acc(*b, vec![g.iter().zip(va).map(|(g, x)| g * x).sum()]);
                    }
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|g| g * c).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let (_, n) = self.value(*b).dims2().expect("matrix");
                if self.rg(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).numel();
                acc(*x, g.to_vec());
                let mut gb = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(*bias, gb);
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(x) => acc(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect(),
            ),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, v)| g / v).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n])
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("matrix");
                acc(*x, transpose_raw(g, c, r))
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let (_, d) = self.value(*x).dims2().expect("matrix");
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(s, v)| *s += v);
                }
                acc(*x, gx)
            }
            Op::LogSoftmax(x, mask) => {
                let (n, c) = node.value.dims2().expect("matrix");
                let y = node.value.data();
                let mut gx = vec![0.0; n * c];
                for i in 0..n {
                    let active = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| active(j)).map(|j| g[i * c + j]).sum();
                    for j in (0..c).filter(|&j| active(j)) {
                        gx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gsum;
                    }
                }
                acc(*x, gx)
            }
            Op::L2Normalize(x, eps) => {
                let (n, d) = node.value.dims2().expect("matrix");
                let xs = val(*x);
                let y = node.value.data();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let norm = row_norm(&xs[r.clone()]);
                    let gi = &g[r.clone()];
                    if norm >= *eps {
                        let yi = &y[r.clone()];
                        let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in gx[r].iter_mut().zip(gi).zip(yi) {
                            *o = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (o, gv) in gx[r].iter_mut().zip(gi) {
                            *o = gv / eps;
                        }
                    }
                }
                acc(*x, gx)
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
