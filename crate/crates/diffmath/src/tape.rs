//! Operation tape and the primitive set.
//!
//! Every primitive evaluates eagerly, records itself on the [`Tape`], and
//! knows its vector-Jacobian product. [`Tape::backward`] replays the record
//! in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::{axis_split, Array};
use crate::error::{DiffError, Result};
use crate::kernels::gemm;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Vector-Jacobian product for [`Tape::custom`]: given input values, the
/// output value, and the upstream gradient, return one gradient per input.
pub type CustomVjp = Box<dyn Fn(&[&Array], &Array, &[f64]) -> Vec<Vec<f64>>>;

/// Named primitive, for callers that dispatch by identifier.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Tanh,
    LeakyRelu(f64),
    Relu,
    Softplus,
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Square,
    Sqrt,
    LayerNorm(f64),
    Gather(Vec<usize>),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Transpose(Var),
    Broadcast(Var),
    Reshape(Var),
    LayerNorm(Var, f64),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, CustomVjp),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives. Single-threaded; one per forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the root.
    pub fn wrt(&self, var: Var) -> Result<Array> {
        if var.tape != self.tape || var.idx >= self.grads.len() {
            return Err(DiffError::Detached);
        }
        let shape = self.shapes[var.idx].clone();
        Ok(match &self.grads[var.idx] {
            Some(g) => Array::from_parts(shape, g.clone()),
            None => Array::zeros(&shape),
        })
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Result<Array> {
        if var.tape != self.tape || var.idx >= self.grads.len() {
            return Err(DiffError::Detached);
        }
        let shape = self.shapes[var.idx].clone();
        Ok(match self.grads[var.idx].take() {
            Some(g) => Array::from_parts(shape, g),
            None => Array::zeros(&shape),
        })
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(DiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}")))
    }
}

/// Sums a full-size gradient down to a leading-axis-broadcast operand.
fn reduce_tiles(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a prefix of
    /// constants can be reused across evaluations. Variables created after
    /// that point must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            Err(DiffError::Detached)
        } else {
            Ok(())
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.check(v)?;
        Ok(&self.nodes[v.idx])
    }

    pub fn value(&self, v: Var) -> &Array {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    /// Dispatches a primitive by identifier.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(DiffError::Shape(format!(
                    "{prim:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::Concat(axis) => self.concat(inputs, *axis),
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::Add => self.add(a, b),
                    Primitive::Sub => self.sub(a, b),
                    Primitive::Mul => self.mul(a, b),
                    Primitive::Div => self.div(a, b),
                    _ => self.matmul(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match prim {
                    Primitive::Exp => self.exp(a),
                    Primitive::Log => self.log(a),
                    Primitive::Tanh => self.tanh(a),
                    Primitive::LeakyRelu(s) => self.leaky_relu(a, *s),
                    Primitive::Relu => self.relu(a),
                    Primitive::Softplus => self.softplus(a),
                    Primitive::Softmax(ax) => self.softmax(a, *ax),
                    Primitive::LogSoftmax(ax) => self.log_softmax(a, *ax),
                    Primitive::Sum(ax) => self.sum(a, *ax),
                    Primitive::Mean(ax) => self.mean(a, *ax),
                    Primitive::Slice { axis, start, end } => self.slice(a, *axis, *start, *end),
                    Primitive::Transpose => self.transpose(a),
                    Primitive::Broadcast(lead) => self.broadcast(a, lead),
                    Primitive::Reshape(shape) => self.reshape(a, shape),
                    Primitive::Square => self.square(a),
                    Primitive::Sqrt => self.sqrt(a),
                    Primitive::LayerNorm(eps) => self.layer_norm(a, *eps),
                    Primitive::Gather(idx) => self.gather(a, idx),
                    _ => unreachable!(),
                }
            }
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let shape = broadcast_shape(va.shape(), vb.shape(), name)?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (la, lb) = (da.len(), db.len());
        let data: Vec<f64> = if la == n && lb == n {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        let rg = self.rg(&[a, b]);
        self.push(Array::from_parts(shape, data), op, rg, name)
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if self.nodes[b.idx].value.data().iter().any(|&v| v == 0.0) {
            return Err(DiffError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// 2-D `[m,k] x [k,n]` or batched 3-D `[N,m,k] x [N,k,n]` product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            _ => {
                return Err(DiffError::Shape(format!("matmul: shapes {sa:?} and {sb:?}")));
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Array::from_parts(out_shape, out), Op::MatMul(a, b), rg, "matmul")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, data), op, rg, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.node(a)?.value.data().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::Domain { op: "log", detail: "non-positive input".into() });
        }
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, "leaky_relu", |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.node(a)?.value.data().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::Domain { op: "sqrt", detail: "non-positive input".into() });
        }
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let (outer, len, inner) = axis_split(va.shape(), axis)?;
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    z += (x[at(j)] - mx).exp();
                }
                if log {
                    let lz = z.ln() + mx;
                    for j in 0..len {
                        out[at(j)] = x[at(j)] - lz;
                    }
                } else {
                    for j in 0..len {
                        out[at(j)] = (x[at(j)] - mx).exp() / z;
                    }
                }
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        let (op, name) = if log {
            (Op::LogSoftmax(a, axis), "log_softmax")
        } else {
            (Op::Softmax(a, axis), "softmax")
        };
        self.push(Array::from_parts(shape, out), op, rg, name)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let (outer, len, inner) = axis_split(va.shape(), axis)?;
        let x = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        if mean {
            let s = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        let (op, name) = if mean { (Op::Mean(a, axis), "mean") } else { (Op::Sum(a, axis), "sum") };
        self.push(Array::from_parts(shape, out), op, rg, name)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.nodes[a.idx].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(vec![1], vec![s]), Op::SumAll(a), rg, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Shape("concat of zero arrays".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.nodes[parts[0].idx].value.shape().to_vec();
        let (outer, _, inner) = axis_split(&first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p.idx].value.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(DiffError::Shape(format!("concat: {first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.idx].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Array::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let (outer, len, inner) = axis_split(va.shape(), axis)?;
        if start >= end || end > len {
            return Err(DiffError::Shape(format!("slice {start}..{end} of axis length {len}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&va.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, out), Op::Slice { src: a, axis, start }, rg, "slice")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let s = va.shape();
        if s.len() < 2 {
            return Err(DiffError::Shape(format!("transpose needs 2+ axes, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = va.len() / (r * c).max(1);
        let out = transpose_data(va.data(), batch, r, c);
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, out), Op::Transpose(a), rg, "transpose")
    }

    /// Prepends leading axes, repeating the array.
    pub fn broadcast(&mut self, a: Var, leading: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let reps: usize = leading.iter().product();
        let mut out = Vec::with_capacity(reps * va.len());
        for _ in 0..reps {
            out.extend_from_slice(va.data());
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(va.shape());
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, out), Op::Broadcast(a), rg, "broadcast")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.nodes[a.idx].value.reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg, "reshape")
    }

    /// Normalizes each vector along the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let d = *va.shape().last().unwrap();
        let mut out = vec![0.0; va.len()];
        for (row, o) in va.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mu, inv) = moments(row, eps);
            for (y, x) in o.iter_mut().zip(row) {
                *y = (x - mu) * inv;
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, out), Op::LayerNorm(a, eps), rg, "layer_norm")
    }

    /// Selects rows (slices along axis 0) by index, with repetition allowed.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.idx].value;
        let rows = va.shape()[0];
        let width = va.len() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(DiffError::Shape(format!("gather index {i} >= {rows}")));
            }
            out.extend_from_slice(&va.data()[i * width..(i + 1) * width]);
        }
        let mut shape = va.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(&[a]);
        self.push(Array::from_parts(shape, out), Op::Gather(a, indices.to_vec()), rg, "gather")
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Array, vjp: CustomVjp) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), vjp), rg, "custom")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let rv = &self.nodes[root.idx].value;
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.idx + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.idx] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, grads[i].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().unwrap(),
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, shapes, grads })
    }

    fn val(&self, v: Var) -> &Array {
        &self.nodes[v.idx].value
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if self.nodes[v.idx].requires_grad {
            accumulate(&mut grads[v.idx], contrib);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, reduce_tiles(g, self.val(*a).len()));
                self.send(grads, *b, reduce_tiles(g, self.val(*b).len()));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, reduce_tiles(g, self.val(*a).len()));
                let mut gb = reduce_tiles(g, self.val(*b).len());
                gb.iter_mut().for_each(|v| *v = -*v);
                self.send(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.requires_grad(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * db[i % lb]).collect();
                    self.send(grads, *a, reduce_tiles(&full, la));
                }
                if self.requires_grad(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * da[i % la]).collect();
                    self.send(grads, *b, reduce_tiles(&full, lb));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.requires_grad(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / db[i % lb]).collect();
                    self.send(grads, *a, reduce_tiles(&full, la));
                }
                if self.requires_grad(*b) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| -gi * da[i % la] / (db[i % lb] * db[i % lb]))
                        .collect();
                    self.send(grads, *b, reduce_tiles(&full, lb));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                if self.requires_grad(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; va.len()];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; vb.len()];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                self.send(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.val(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                self.send(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.val(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { gi * slope })
                    .collect();
                self.send(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                self.send(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.val(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| gi * sigmoid(*xi)).collect();
                self.send(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.val(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                self.send(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.iter().zip(y).map(|(gi, yi)| gi / (2.0 * yi)).collect();
                self.send(grads, *a, d);
            }
            Op::Neg(a) => self.send(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => self.send(grads, *a, g.to_vec()),
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        if log {
                            let mut gs = 0.0;
                            for j in 0..len {
                                gs += g[at(j)];
                            }
                            for j in 0..len {
                                d[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                            }
                        } else {
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, len, inner) = axis_split(self.val(*a).shape(), *axis)?;
                let s = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[o * len * inner + j * inner + i] = g[o * inner + i] * s;
                        }
                    }
                }
                self.send(grads, *a, d);
            }
            Op::SumAll(a) => {
                let n = self.val(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).shape()[*axis];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.send(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, len, inner) = axis_split(self.val(*src).shape(), *axis)?;
                let w = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    d[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.send(grads, *src, d);
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                self.send(grads, *a, transpose_data(g, batch, r, c));
            }
            Op::Broadcast(a) => {
                let len = self.val(*a).len();
                self.send(grads, *a, reduce_tiles(g, len));
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::LayerNorm(a, eps) => {
                let x = self.val(*a).data();
                let dim = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for r in 0..g.len() / dim {
                    let rs = r * dim..(r + 1) * dim;
                    let (_, inv) = moments(&x[rs.clone()], *eps);
                    let (gr, yr) = (&g[rs.clone()], &y[rs.clone()]);
                    let mg = gr.iter().sum::<f64>() / dim as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for ((dd, gi), yi) in d[rs].iter_mut().zip(gr).zip(yr) {
                        *dd = inv * (gi - mg - yi * mgy);
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Gather(a, indices) => {
                let va = self.val(*a);
                let width = va.len() / va.shape()[0].max(1);
                let mut d = vec![0.0; va.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in d[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *dst += src;
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Custom(inputs, vjp) => {
                let vals: Vec<&Array> = inputs.iter().map(|v| self.val(*v)).collect();
                let ds = vjp(&vals, &node.value, g);
                if ds.len() != inputs.len() {
                    return Err(DiffError::Shape("custom vjp returned wrong arity".into()));
                }
                for (v, d) in inputs.iter().zip(ds) {
                    if d.len() != self.val(*v).len() {
                        return Err(DiffError::Shape("custom vjp gradient has wrong length".into()));
                    }
                    self.send(grads, *v, d);
                }
            }
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn transpose_data(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = x[off + i * c + j];
            }
        }
    }
    out
}
