//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value. Nodes whose inputs
//! all lack `requires_grad` are stored as constants and carry no backward
//! bookkeeping. `backward` walks the node list in reverse once.

use std::fmt;
use std::str::FromStr;

use super::tensor::{check_shape, Tensor};
use super::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set reachable through [`Tape::apply_primitive`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Relu,
    Tanh,
    Softmax { axis: usize },
    Mean,
    Sum,
    Attention,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Attention => "attention",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name[:arg[:arg...]]`, e.g. `matmul`, `concat:0`, `slice:1:0:4`, `reshape:2x3`.
impl FromStr for Primitive {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<usize, NumError> {
            args.get(i)
                .ok_or_else(|| NumError::UnknownPrimitive(format!("{s}: missing argument {i}")))?
                .parse::<usize>()
                .map_err(|_| NumError::UnknownPrimitive(format!("{s}: bad argument {i}")))
        };
        Ok(match name {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "relu" => Primitive::Relu,
            "tanh" => Primitive::Tanh,
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "attention" => Primitive::Attention,
            "concat" => Primitive::Concat { axis: num(0)? },
            "softmax" => Primitive::Softmax { axis: num(0)? },
            "slice" => Primitive::Slice { axis: num(0)?, start: num(1)?, end: num(2)? },
            "reshape" => {
                let spec = args
                    .first()
                    .ok_or_else(|| NumError::UnknownPrimitive(format!("{s}: missing shape")))?;
                let shape = spec
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| NumError::UnknownPrimitive(format!("{s}: bad shape")))?;
                Primitive::Reshape { shape }
            }
            _ => return Err(NumError::UnknownPrimitive(s.to_string())),
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Softmax { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    MeanAxis { input: Var, axis: usize },
    MaxAxis { input: Var, axis: usize, argmax: Vec<usize> },
    CumSum { input: Var, axis: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SmoothL1 { pred: Var, target: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph plus, after [`Tape::backward`], leaf gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Four-lane dot product with a fixed summation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Const };
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are retained for leaves with `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var, NumError> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = t.into_parts();
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumError> {
        check_shape(&shape, data.len())?;
        Ok(self.push(shape, data, Op::Const, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are finite")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Tape::grad`], reporting zeros where no gradient flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()])
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Dispatches one of the named primitives.
    pub fn apply_primitive(&mut self, op: &Primitive, inputs: &[Var]) -> Result<Var, NumError> {
        let arity = |n: usize| -> Result<(), NumError> {
            if inputs.len() != n {
                return Err(NumError::shape(op.name(), format!("expected {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match op {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, end } => {
                arity(1)?;
                self.slice(inputs[0], *axis, *start, *end)
            }
            Primitive::Reshape { shape } => {
                arity(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            Primitive::Softmax { axis } => {
                arity(1)?;
                self.softmax(inputs[0], *axis)
            }
            Primitive::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            Primitive::Attention => {
                arity(3)?;
                self.attention(inputs[0], inputs[1], inputs[2])
            }
        }
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                axpy(aip, &bv[p * n..(p + 1) * n], crow);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn broadcast_check(&self, name: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let la = self.value(a).len();
        let lb = self.value(b).len();
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if lb == 1 || suffix {
            debug_assert_eq!(la % lb, 0);
            Ok(())
        } else {
            Err(NumError::shape(name, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    /// `a + b`, where `b` has `a`'s shape, a trailing sub-shape of it, or one element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b);
        let lb = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % lb]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_check("sub", a, b)?;
        let bv = self.value(b);
        let lb = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x - bv[i % lb]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b);
        let lb = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x * bv[i % lb]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = *inputs.first().ok_or_else(|| NumError::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NumError::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumError::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let data = self.value(v);
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(NumError::shape("slice", format!("[{start}..{end}) on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let data = self.value(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        check_shape(&shape, self.value(a).len()).map_err(|_| {
            NumError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a)))
        })?;
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.abs()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Abs(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { input: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                add_into(dst, &x[(o * len + j) * inner..(o * len + j + 1) * inner]);
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(reduced_shape(&shape, axis), out, Op::MeanAxis { input: a, axis }, rg))
    }

    /// Max along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("max_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for i in 0..inner {
                    if row[i] > out[o * inner + i] {
                        out[o * inner + i] = row[i];
                        argmax[o * inner + i] = j;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(reduced_shape(&shape, axis), out, Op::MaxAxis { input: a, axis, argmax }, rg))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::shape("cumsum", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for j in 1..len {
                let (head, tail) = out.split_at_mut((o * len + j) * inner);
                let prev = &head[(o * len + j - 1) * inner..];
                add_into(&mut tail[..inner], &prev[..inner]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::CumSum { input: a, axis }, rg))
    }

    /// Gathers entries along axis 0.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        if rows.is_empty() {
            return Err(NumError::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(NumError::IndexOutOfRange { op: "gather_rows", index: bad, len: shape[0] });
        }
        let width = self.value(a).len() / shape[0];
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::GatherRows { input: a, rows: rows.to_vec() }, rg))
    }

    /// Single-head scaled dot-product attention: `softmax(q kᵀ / √d) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, NumError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(NumError::shape("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (n, d, m, dv) = (sq[0], sq[1], sk[0], sv[1]);
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n * m];
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let qi = &qv[i * d..(i + 1) * d];
            let row = &mut probs[i * m..(i + 1) * m];
            for (j, p) in row.iter_mut().enumerate() {
                *p = dot(qi, &kv[j * d..(j + 1) * d]) * scale;
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - mx).exp();
                z += *p;
            }
            let orow = &mut out[i * dv..(i + 1) * dv];
            for (j, p) in row.iter_mut().enumerate() {
                *p /= z;
                axpy(*p, &vv[j * dv..(j + 1) * dv], orow);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(vec![n, dv], out, Op::Attention { q, k, v, probs }, rg))
    }

    /// Per-row normalization over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        if !(eps > 0.0) {
            return Err(NumError::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(NumError::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for last dimension {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Mean Huber loss with unit transition point.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var, NumError> {
        if self.shape(pred) != self.shape(target) {
            return Err(NumError::shape(
                "smooth_l1",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let total: f64 = p.iter().zip(t).map(|(a, b)| huber(a - b)).sum();
        let loss = total / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![loss], Op::SmoothL1 { pred, target }, rg))
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumError> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(NumError::IndexOutOfRange { op: "cross_entropy", index: target, len: z.len() });
        }
        // Shift by the max and split its unit term off so that confident
        // predictions keep full relative precision via ln_1p.
        let (imax, mx) = z.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        });
        let rest: f64 = z.iter().enumerate().filter(|&(i, _)| i != imax).map(|(_, v)| (v - mx).exp()).sum();
        let loss = (mx - z[target]) + rest.ln_1p();
        let lse = mx + rest.ln_1p();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let data = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), data, Op::Const, false)
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates `∂loss/∂leaf` for every leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            backprop_node(nodes, node, &gy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }
}

#[inline]
fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[inline]
fn huber_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

/// Adds `g` into the gradient slot of `v` if it participates in differentiation.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => add_into(buf, &g),
        slot @ None => *slot = Some(g),
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn reduce_broadcast(gy: &[f64], lb: usize, weights: Option<&[f64]>) -> Vec<f64> {
    let mut gb = vec![0.0; lb];
    match weights {
        None => {
            for chunk in gy.chunks_exact(lb) {
                add_into(&mut gb, chunk);
            }
        }
        Some(w) => {
            for (i, g) in gy.iter().enumerate() {
                gb[i % lb] += g * w[i];
            }
        }
    }
    gb
}

fn backprop_node(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].data };
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let gyi = &gy[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] = dot(gyi, &bv[p * n..(p + 1) * n]);
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let gyi = &gy[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(av[i * k + p], gyi, &mut gb[p * n..(p + 1) * n]);
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add(a, b) => {
            if rg(*b) {
                let gb = reduce_broadcast(gy, val(*b).len(), None);
                accumulate(nodes, grads, *b, gb);
            }
            accumulate(nodes, grads, *a, gy.to_vec());
        }
        Op::Sub(a, b) => {
            if rg(*b) {
                let mut gb = reduce_broadcast(gy, val(*b).len(), None);
                gb.iter_mut().for_each(|v| *v = -*v);
                accumulate(nodes, grads, *b, gb);
            }
            accumulate(nodes, grads, *a, gy.to_vec());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let lb = bv.len();
            if rg(*b) {
                let gb = reduce_broadcast(gy, lb, Some(av));
                accumulate(nodes, grads, *b, gb);
            }
            if rg(*a) {
                let ga: Vec<f64> = gy.iter().enumerate().map(|(i, g)| g * bv[i % lb]).collect();
                accumulate(nodes, grads, *a, ga);
            }
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, gy.iter().map(|g| g * c).collect());
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].shape[*axis];
                if let Some(buf) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = &nodes[input.0].shape;
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let width = node.shape[*axis];
            if let Some(buf) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let dst = &mut buf[(o * len + start) * inner..(o * len + start + width) * inner];
                    add_into(dst, &gy[o * width * inner..(o + 1) * width * inner]);
                }
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, gy.to_vec()),
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, gy.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
        }
        Op::Tanh(a) => {
            let y = &node.data;
            accumulate(nodes, grads, *a, gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
        }
        Op::Abs(a) => {
            let x = val(*a);
            let ga = gy
                .iter()
                .zip(x)
                .map(|(g, &x)| {
                    if x > 0.0 {
                        *g
                    } else if x < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            let y = &node.data;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * len * inner + j * inner + i;
                    let s: f64 = (0..len).map(|j| gy[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = y[idx(j)] * (gy[idx(j)] - s);
                    }
                }
            }
            accumulate(nodes, grads, *input, gx);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![gy[0]; n]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![gy[0] / n as f64; n]);
        }
        Op::MeanAxis { input, axis } => {
            let (outer, len, inner) = split_axis(&nodes[input.0].shape, *axis);
            let inv = 1.0 / len as f64;
            if let Some(buf) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let g = &gy[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        axpy(inv, g, &mut buf[(o * len + j) * inner..(o * len + j + 1) * inner]);
                    }
                }
            }
        }
        Op::MaxAxis { input, axis, argmax } => {
            let (outer, len, inner) = split_axis(&nodes[input.0].shape, *axis);
            if let Some(buf) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        buf[(o * len + j) * inner + i] += gy[o * inner + i];
                    }
                }
            }
        }
        Op::CumSum { input, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            let mut gx = gy.to_vec();
            for o in 0..outer {
                for j in (0..len.saturating_sub(1)).rev() {
                    let (head, tail) = gx.split_at_mut((o * len + j + 1) * inner);
                    add_into(&mut head[(o * len + j) * inner..], &tail[..inner]);
                }
            }
            accumulate(nodes, grads, *input, gx);
        }
        Op::GatherRows { input, rows } => {
            let width = node.data.len() / rows.len();
            if let Some(buf) = slot(nodes, grads, *input) {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut buf[r * width..(r + 1) * width], &gy[k * width..(k + 1) * width]);
                }
            }
        }
        Op::Attention { q, k, v, probs } => {
            let (n, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
            let (m, dv) = (nodes[v.0].shape[0], nodes[v.0].shape[1]);
            let scale = 1.0 / (d as f64).sqrt();
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let mut gq = vec![0.0; n * d];
            let mut gk = vec![0.0; m * d];
            let mut gv = vec![0.0; m * dv];
            let mut ds = vec![0.0; m];
            for i in 0..n {
                let gyi = &gy[i * dv..(i + 1) * dv];
                let p = &probs[i * m..(i + 1) * m];
                let mut s = 0.0;
                for j in 0..m {
                    let dp = dot(gyi, &vv[j * dv..(j + 1) * dv]);
                    ds[j] = dp;
                    s += dp * p[j];
                    axpy(p[j], gyi, &mut gv[j * dv..(j + 1) * dv]);
                }
                for j in 0..m {
                    let g = p[j] * (ds[j] - s) * scale;
                    axpy(g, &kv[j * d..(j + 1) * d], &mut gq[i * d..(i + 1) * d]);
                    axpy(g, &qv[i * d..(i + 1) * d], &mut gk[j * d..(j + 1) * d]);
                }
            }
            accumulate(nodes, grads, *q, gq);
            accumulate(nodes, grads, *k, gk);
            accumulate(nodes, grads, *v, gv);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *node.shape.last().expect("rank >= 1");
            let rows = node.data.len() / d;
            let g = val(*gamma);
            if rg(*gamma) {
                let mut gg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gy[r * d + j] * xhat[r * d + j];
                    }
                }
                accumulate(nodes, grads, *gamma, gg);
            }
            if rg(*beta) {
                accumulate(nodes, grads, *beta, reduce_broadcast(gy, d, None));
            }
            if rg(*x) {
                let mut gx = vec![0.0; node.data.len()];
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = gy[r * d + j] * g[j];
                        s1 += dh;
                        s2 += dh * xhat[r * d + j];
                    }
                    let c = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gy[r * d + j] * g[j];
                        gx[r * d + j] = c * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::SmoothL1 { pred, target } => {
            let (p, t) = (val(*pred), val(*target));
            let c = gy[0] / p.len() as f64;
            let gp: Vec<f64> = p.iter().zip(t).map(|(a, b)| c * huber_grad(a - b)).collect();
            if rg(*target) {
                accumulate(nodes, grads, *target, gp.iter().map(|v| -v).collect());
            }
            accumulate(nodes, grads, *pred, gp);
        }
        Op::CrossEntropy { logits, target, probs } => {
            let mut gz: Vec<f64> = probs.iter().map(|p| p * gy[0]).collect();
            gz[*target] -= gy[0];
            accumulate(nodes, grads, *logits, gz);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64], rg: bool) -> Var {
        tape.leaf_from(shape.to_vec(), data.to_vec(), rg).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let x = leaf(&mut t, &[2, 1], &[3.0, 4.0], false);
        let y = t.apply_primitive(&Primitive::MatMul, &[i, x]).unwrap();
        assert_eq!(t.shape(y), &[2, 1]);
        assert_eq!(t.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[0.0, 0.0, 0.0], false);
        let y = t.apply_primitive(&Primitive::Softmax { axis: 0 }, &[x]).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_shape_algebra() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6], false);
        let b = leaf(&mut t, &[4, 3], &[1.0; 12], false);
        let c = t.apply_primitive(&Primitive::Concat { axis: 0 }, &[a, b]).unwrap();
        assert_eq!(t.shape(c), &[6, 3]);
        let bad = leaf(&mut t, &[4, 2], &[1.0; 8], false);
        let err = t.concat(&[a, bad], 0).unwrap_err();
        assert!(err.to_string().contains("concat"));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6], false);
        let b = leaf(&mut t, &[2, 3], &[0.0; 6], false);
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        assert!(matches!("conv2d".parse::<Primitive>(), Err(NumError::UnknownPrimitive(_))));
        assert_eq!("slice:1:0:2".parse::<Primitive>().unwrap(), Primitive::Slice { axis: 1, start: 0, end: 2 });
        assert_eq!("reshape:2x3".parse::<Primitive>().unwrap(), Primitive::Reshape { shape: vec![2, 3] });
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[5.0, 5.0, 5.0], false);
        let g = leaf(&mut t, &[3], &[1.0; 3], false);
        let b = leaf(&mut t, &[3], &[0.0; 3], false);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        // Direct evaluation: mean 2, std 1 -> x̂ = [-1, 1], shifted by beta = 2.
        let x = leaf(&mut t, &[2], &[1.0, 3.0], false);
        let g = leaf(&mut t, &[2], &[1.0; 2], false);
        let b = leaf(&mut t, &[2], &[2.0; 2], false);
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let mu: f64 = (1.0 + 3.0) / 2.0;
        let sd: f64 = (((1.0 - mu).powi(2) + (3.0 - mu).powi(2)) / 2.0 + 1e-12).sqrt();
        let expect = [(1.0 - mu) / sd + 2.0, (3.0 - mu) / sd + 2.0];
        for (a, e) in t.value(y).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((t.value(y)[0] - 1.0).abs() < 1e-9 && (t.value(y)[1] - 3.0).abs() < 1e-9);
        assert!(t.layer_norm(x, g, b, 0.0).is_err());
        let short = leaf(&mut t, &[3], &[1.0; 3], false);
        assert!(t.layer_norm(x, short, b, 1e-5).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1], &[2.0], false);
        let z = leaf(&mut t, &[1], &[0.0], false);
        let l = t.smooth_l1(p, z).unwrap();
        assert_eq!(t.scalar_value(l), 1.5);
        let p = leaf(&mut t, &[1], &[0.5], false);
        let l = t.smooth_l1(p, z).unwrap();
        assert_eq!(t.scalar_value(l), 0.125);
        let same = t.smooth_l1(z, z).unwrap();
        assert_eq!(t.scalar_value(same), 0.0);
        let two = leaf(&mut t, &[2], &[0.0; 2], false);
        assert!(t.smooth_l1(p, two).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let z = leaf(&mut t, &[6], &[0.0; 6], false);
        let l = t.cross_entropy(z, 3).unwrap();
        assert!((t.scalar_value(l) - 6f64.ln()).abs() < 1e-12);
        let z2 = leaf(&mut t, &[2], &[10.0, -10.0], false);
        let l2 = t.cross_entropy(z2, 0).unwrap();
        let direct = (-20f64).exp().ln_1p();
        assert!((t.scalar_value(l2) - direct).abs() < 1e-12 * direct);
        assert!((t.scalar_value(l2) - 2.06e-9).abs() < 1e-11);
        assert!(t.cross_entropy(z2, 2).is_err());

        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let z = leaf(&mut t, &[3], &[0.5, step as f64 * 0.3, -0.2], false);
            let l = t.cross_entropy(z, 1).unwrap();
            let l = t.scalar_value(l);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn backward_of_sum_is_ones_and_detach_blocks() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0], true);
        let y = leaf(&mut t, &[2, 2], &[5.0, 6.0, 7.0, 8.0], true);
        let yd = t.detach(y);
        let prod = t.mul(x, yd).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0, 6.0, 7.0, 8.0]);
        assert!(t.grad(y).is_none());
        assert_eq!(t.grad_or_zeros(y), vec![0.0; 4]);
        assert!(matches!(t.backward(s), Err(NumError::TapeConsumed)));

        let mut t = Tape::new();
        let x = leaf(&mut t, &[3, 1, 2], &[1.0; 6], true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0], true);
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn cumsum_and_max_axis() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let c = t.cumsum(x, 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 6.0, 4.0, 9.0, 15.0]);
        let m = t.max_axis(x, 0).unwrap();
        assert_eq!(t.value(m), &[4.0, 5.0, 6.0]);
        let mm = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.value(mm), &[2.0, 5.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 2.0, 1.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn constants_record_no_backward_state() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 2], &[1.0; 4], false);
        let b = t.tanh(a);
        assert!(!t.requires_grad(b));
        assert!(matches!(t.nodes[b.0].op, Op::Const));
    }
}
