//! Wengert-list reverse-mode differentiation.
//!
//! Every differentiable primitive appends a node holding its output value and
//! whatever it needs to replay the adjoint. [`Tape::backward`] walks the nodes
//! once, in reverse insertion order, and returns gradients for leaf variables.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::tensor::{rows_cols, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kind, used for reporting and for adjoint fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Abs,
    Scale,
    AddRow,
    Concat,
    SliceCols,
    Softmax,
    LayerNorm,
    Gelu,
    Dropout,
    Gather,
    MaxPool,
    MeanPool,
    CrossEntropy,
    Mse,
    Sum,
    Stack,
    Reshape,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        bias: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        start: usize,
        end: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: f64,
    },
    Sum(Vec<Var>),
    Stack(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Abs(_) => OpKind::Abs,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Gather { .. } => OpKind::Gather,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
            Op::Stack(_) => OpKind::Stack,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberately wrong adjoint, for negative-control gradient checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: OpKind,
    pub scale: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    /// Discrete choices made by the forward pass: max-pool argmax rows and
    /// the signs fed to `abs`. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool { argmax, .. } => sig.extend(argmax.iter().map(|&r| r as i64)),
                Op::Abs(x) => sig.extend(self.value(*x).data().iter().map(|v| v.signum() as i64)),
                _ => {}
            }
        }
        sig
    }

    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the adjoint of every `fault.op` node by `fault.scale` during
    /// backward. Only meant for verifying that gradient checks catch bugs.
    pub fn with_adjoint_fault(mut self, fault: AdjointFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a @ b`. A 1-D `a` is treated as a single row and yields a 1-D result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() > 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = rows_cols(&sa);
        let (br, bc) = (sb[0], sb[1]);
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bref = MatRef::new(bv, br, bc);
            gemm(
                MatRef::new(av, m, k),
                if b_t { bref.t() } else { bref },
                &mut out,
                0.0,
            );
        }
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                a_t: false,
                b_t,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Elementwise absolute value; the adjoint uses sign(0) = 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, c) = vx.rows_cols();
        if vb.shape() != [c] {
            return Err(shape_err("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Concatenates along the last axis; all parts must share leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Columns `start..start + width` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = vx.rows_cols();
        if start + width > c {
            return Err(shape_err("slice_cols", vx.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(rows * width);
        for row in vx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = width;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis. Columns whose `key_mask` entry is false get
    /// probability zero.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let (_, c) = vx.rows_cols();
        if let Some(mask) = key_mask {
            if mask.len() != c {
                return Err(shape_err("softmax", vx.shape(), &[mask.len()]));
            }
        }
        let mut data = vec![0.0; vx.len()];
        for (row, out) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(row, key_mask, out);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = vx.rows_cols();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                vx.shape(),
                self.value(gamma).shape(),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Row lookup: `out[i] = table[indices[i]]`, shape `[len, cols]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(shape_err("gather", vt.shape(), &[indices.len()]));
        }
        let (rows, c) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn check_span(&self, x: Var, start: usize, end: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("span pooling", s, &[start, end]));
        }
        let rows = s[0];
        if start > end || end >= rows {
            return Err(TensorError::SpanOutOfRange { start, end, rows });
        }
        Ok((rows, s[1]))
    }

    /// Per-column maximum over rows `start..=end` of a matrix. The adjoint
    /// flows to the first row attaining the maximum.
    pub fn max_pool_span(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.check_span(x, start, end)?;
        let vx = self.value(x);
        let mut out = vx.row(start).to_vec();
        let mut argmax = vec![start; c];
        for r in start + 1..=end {
            for (j, &v) in vx.row(r).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MaxPool { x, argmax }, rg))
    }

    /// Per-column mean over rows `start..=end` of a matrix.
    pub fn mean_pool_span(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.check_span(x, start, end)?;
        let vx = self.value(x);
        let count = (end - start + 1) as f64;
        let mut out = vec![0.0; c];
        for r in start..=end {
            for (o, v) in out.iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanPool { x, start, end }, rg))
    }

    /// Mean over rows of `-log softmax(logits_row)[label]`, computed through
    /// log-sum-exp. A 1-D `logits` is a single example.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, c) = vl.rows_cols();
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", vl.shape(), &[labels.len()]));
        }
        let mut probs = vec![0.0; vl.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange { label, classes: c });
            }
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Squared error of a single-element prediction.
    pub fn mse(&mut self, pred: Var, target: f64) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != 1 {
            return Err(shape_err("mse", vp.shape(), &[1]));
        }
        let d = vp.item() - target;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(d * d), Op::Mse { pred, target }, rg))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("sum of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        let mut data = vec![0.0; self.value(*first).len()];
        for &p in parts {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(shape_err("sum", &shape, v.shape()));
            }
            for (d, x) in data.iter_mut().zip(v.data()) {
                *d += x;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sum(parts.to_vec()), rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if v.shape() != [width] {
                return Err(shape_err("stack", &[width], v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(rows);
        Ok(self.push(
            Tensor::new(vec![rows.len(), width], data)?,
            Op::Stack(rows.to_vec()),
            rg,
        ))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.sum(parts)?;
        Ok(self.scale(s, 1.0 / parts.len() as f64))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(fault) = self.fault {
                if fault.op == node.op.kind() {
                    for v in &mut g {
                        *v *= fault.scale;
                    }
                }
            }
            self.adjoint(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let (ar, ac) = if sa.len() == 1 {
                    (1, sa[0])
                } else {
                    (sa[0], sa[1])
                };
                let (br, bc) = (vb.shape()[0], vb.shape()[1]);
                let aref = MatRef::new(va.data(), ar, ac);
                let bref = MatRef::new(vb.data(), br, bc);
                let lhs = if *a_t { aref.t() } else { aref };
                let rhs = if *b_t { bref.t() } else { bref };
                let m = if *a_t { ac } else { ar };
                let n = if *b_t { br } else { bc };
                let gref = MatRef::new(g, m, n);
                if self.wants(*a) {
                    let slot = accumulate(&mut grads[a.0], va.len());
                    if *a_t {
                        gemm(rhs, gref.t(), slot, 1.0);
                    } else {
                        gemm(gref, rhs.t(), slot, 1.0);
                    }
                }
                if self.wants(*b) {
                    let slot = accumulate(&mut grads[b.0], vb.len());
                    if *b_t {
                        gemm(gref.t(), lhs, slot, 1.0);
                    } else {
                        gemm(lhs.t(), gref, slot, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let slot = accumulate(&mut grads[v.0], g.len());
                        slot.iter_mut().zip(g).for_each(|(s, x)| *s += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let slot = accumulate(&mut grads[v.0], g.len());
                        slot.iter_mut().zip(g).for_each(|(s, x)| *s += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let slot = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let slot = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * va[i];
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                let slot = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    let sign = if vx[i] > 0.0 {
                        1.0
                    } else if vx[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    slot[i] += g[i] * sign;
                }
            }
            Op::Scale(x, c) => {
                let slot = accumulate(&mut grads[x.0], g.len());
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += c * v);
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    let slot = accumulate(&mut grads[x.0], g.len());
                    slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let slot = accumulate(&mut grads[bias.0], c);
                    for row in g.chunks(c) {
                        slot.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let slot = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            slot[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, v)| *s += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (rows, c) = vx.rows_cols();
                let w = g.len() / rows.max(1);
                let slot = accumulate(&mut grads[x.0], vx.len());
                for r in 0..rows {
                    for j in 0..w {
                        slot[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, c) = node.value.rows_cols();
                let slot = accumulate(&mut grads[x.0], y.len());
                for ((yr, gr), sr) in y.chunks(c).zip(g.chunks(c)).zip(slot.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let c = gam.len();
                if self.wants(*gamma) {
                    let slot = accumulate(&mut grads[gamma.0], c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            slot[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let slot = accumulate(&mut grads[beta.0], c);
                    for gr in g.chunks(c) {
                        slot.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                    }
                }
                if self.wants(*x) {
                    let slot = accumulate(&mut grads[x.0], g.len());
                    let n = c as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            slot[r * c + j] += inv / n * (n * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let slot = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * gelu_grad(vx[i]);
                }
            }
            Op::Dropout { x, mask } => {
                let slot = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * mask[i];
                }
            }
            Op::Gather { table, indices } => {
                let vt = self.value(*table);
                let c = vt.shape()[1];
                let slot = accumulate(&mut grads[table.0], vt.len());
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        slot[i * c + j] += g[r * c + j];
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let vx = self.value(*x);
                let c = vx.shape()[1];
                let slot = accumulate(&mut grads[x.0], vx.len());
                for (j, &r) in argmax.iter().enumerate() {
                    slot[r * c + j] += g[j];
                }
            }
            Op::MeanPool { x, start, end } => {
                let vx = self.value(*x);
                let c = vx.shape()[1];
                let w = 1.0 / (end - start + 1) as f64;
                let slot = accumulate(&mut grads[x.0], vx.len());
                for r in *start..=*end {
                    for j in 0..c {
                        slot[r * c + j] += g[j] * w;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let w = g[0] / labels.len() as f64;
                let slot = accumulate(&mut grads[logits.0], probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        slot[r * c + j] += w * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).item();
                let slot = accumulate(&mut grads[pred.0], 1);
                slot[0] += g[0] * 2.0 * (p - target);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if self.wants(p) {
                        let slot = accumulate(&mut grads[p.0], g.len());
                        slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Stack(rows) => {
                let width = g.len() / rows.len();
                for (&r, chunk) in rows.iter().zip(g.chunks(width)) {
                    if self.wants(r) {
                        let slot = accumulate(&mut grads[r.0], width);
                        slot.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Reshape(x) => {
                let slot = accumulate(&mut grads[x.0], g.len());
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
    }
}

/// Numerically stable softmax of one row; masked-out columns are zero.
pub fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for j in 0..row.len() {
        out[j] = if keep(j) { (row[j] - max).exp() } else { 0.0 };
        sum += out[j];
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
