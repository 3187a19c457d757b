//! Define-by-run tape with reverse-mode accumulation.
//!
//! Every primitive evaluates eagerly and appends a node; nodes are stored in
//! creation order, which is a topological order, so the backward pass is a
//! single reverse sweep.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose vector-Jacobian product is supplied by
/// the caller instead of being derived from primitives.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one cotangent per input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

/// Primitive applied at a node.
#[derive(Clone)]
pub enum Op<T: Element> {
    Leaf,
    Const,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    ScalarMul(T),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Sigmoid,
    Relu,
    Tanh,
    Softmax { axis: usize },
    Exp,
    Log,
    Sqrt,
    LayerNorm { eps: f64 },
    Custom(Arc<dyn CustomOp<T>>),
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::ScalarMul(_) => "scalar-multiply",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Sum { .. } => "reduce-sum",
            Op::Mean { .. } => "mean",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::LayerNorm { .. } => "layer-normalize",
            Op::Custom(c) => c.name(),
        }
    }
}

impl<T: Element> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Node<T: Element> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, Var>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, what: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    /// Named differentiable leaf. Re-registering a name returns a fresh leaf
    /// and rebinds the name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.names.insert(name.into(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    /// Anonymous differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, Vec::new(), value, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Const, Vec::new(), value, false)
    }

    fn push_raw(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, rg: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteResult(op.name().to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, inputs, value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul, vec![a, b], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(Op::Transpose, vec![a], out)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = if x.shape() == y.shape() {
            x.zip_map(y, f)?
        } else if y.len() == 1 {
            let s = y.data()[0];
            x.map(|v| f(v, s))
        } else if x.len() == 1 {
            let s = x.data()[0];
            y.map(|v| f(s, v))
        } else {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                x.shape(),
                y.shape()
            )));
        };
        self.push(op, vec![a, b], out)
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let out = self.value(a).scale(s);
        self.push(Op::ScalarMul(s), vec![a], out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::ShapeMismatch(format!(
                    "concat along {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(Op::Concat { axis }, parts.to_vec(), out)
    }

    /// `a[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "slice")?;
        if start >= end || end > shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{end} of extent {}",
                shape[axis]
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let w = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        self.push(Op::Slice { axis, start, end }, vec![a], out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        self.push(Op::Reshape, vec![a], out)
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let x = self.value(a);
        let out = match axis {
            None => {
                let n = T::c(x.len() as f64);
                let s = x.sum();
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(axis) => {
                check_axis(x.shape(), axis, "reduce")?;
                let (outer, extent, inner) = split_axis(x.shape(), axis);
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let row = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                if mean {
                    let n = T::c(extent as f64);
                    data.iter_mut().for_each(|d| *d = *d / n);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = 1;
                Tensor::new(shape, data)?
            }
        };
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        self.push(op, vec![a], out)
    }

    /// Sum over `axis` (kept with extent 1), or over everything into a scalar.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(op, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt, |x| x.sqrt())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(x.shape(), axis, "softmax")?;
        let out = softmax_along(x, axis);
        self.push(Op::Softmax { axis }, vec![a], out)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("layer-normalize of a rank-0 tensor".into()))?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(width) {
            let (mu, inv) = row_moments(row, eps);
            data.extend(row.iter().map(|&v| (v - mu) * inv));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::LayerNorm { eps }, vec![a], out)
    }

    /// Appends a node whose forward value was computed elsewhere.
    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        self.push(Op::Custom(op), inputs.to_vec(), output)
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            for (inp, c) in node.inputs.iter().zip(contributions) {
                let Some(c) = c else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
            // Leaves and constants keep their cotangent; interior nodes drop it.
            grads[idx] = None;
        }
        Ok(Gradients { grads })
    }

    /// Per-input cotangents of one node; `None` for inputs that need none.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        let one = |t: Tensor<T>| vec![Some(t)];
        Ok(match &node.op {
            Op::Leaf | Op::Const => Vec::new(),
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = a.dims2()?;
                let n = b.dims2()?.1;
                let da = want(0).then(|| {
                    // dA = G · Bᵀ
                    let mut out = vec![T::zero(); m * k];
                    T::gemm_strided(m, n, k, g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut out);
                    Tensor::new([m, k], out)
                });
                let db = want(1).then(|| {
                    // dB = Aᵀ · G
                    let mut out = vec![T::zero(); k * n];
                    T::gemm_strided(k, m, n, a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut out);
                    Tensor::new([k, n], out)
                });
                vec![da.transpose()?, db.transpose()?]
            }
            Op::Transpose => one(g.transpose()?),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let sign = if matches!(node.op, Op::Sub) { -T::one() } else { T::one() };
                let local_a = |gi: T, i: usize| match node.op {
                    Op::Mul => gi * b.data()[if b.len() == 1 { 0 } else { i }],
                    _ => gi,
                };
                let local_b = |gi: T, i: usize| match node.op {
                    Op::Mul => gi * a.data()[if a.len() == 1 { 0 } else { i }],
                    _ => gi * sign,
                };
                let reduce_to = |target: &Tensor<T>, f: &dyn Fn(T, usize) -> T| {
                    if target.len() == g.len() && target.shape() == g.shape() {
                        Tensor::new(
                            target.shape().to_vec(),
                            g.data().iter().enumerate().map(|(i, &gi)| f(gi, i)).collect(),
                        )
                    } else {
                        let s = g.data().iter().enumerate().map(|(i, &gi)| f(gi, i)).sum();
                        Tensor::new(target.shape().to_vec(), vec![s])
                    }
                };
                let da = want(0).then(|| reduce_to(a, &local_a)).transpose()?;
                let db = want(1).then(|| reduce_to(b, &local_b)).transpose()?;
                vec![da, db]
            }
            Op::ScalarMul(s) => one(g.scale(*s)),
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let shape = input(i).shape().to_vec();
                    let ext = shape[*axis];
                    if want(i) {
                        let mut data = Vec::with_capacity(input(i).len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        out.push(Some(Tensor::new(shape, data)?));
                    } else {
                        out.push(None);
                    }
                    offset += ext;
                }
                out
            }
            Op::Slice { axis, start, end } => {
                let shape = input(0).shape().to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let mut data = vec![T::zero(); input(0).len()];
                let w = (end - start) * inner;
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    data[base..base + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
                }
                one(Tensor::new(shape, data)?)
            }
            Op::Reshape => one(g.reshape(input(0).shape().to_vec())?),
            Op::Sum { axis } | Op::Mean { axis } => {
                let x = input(0);
                let mean = matches!(node.op, Op::Mean { .. });
                match axis {
                    None => {
                        let n = if mean { T::c(x.len() as f64) } else { T::one() };
                        one(Tensor::full(x.shape().to_vec(), g.data()[0] / n))
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = split_axis(x.shape(), *axis);
                        let n = if mean { T::c(extent as f64) } else { T::one() };
                        let mut data = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let src = &g.data()[o * inner..(o + 1) * inner];
                            for _ in 0..extent {
                                data.extend(src.iter().map(|&v| v / n));
                            }
                        }
                        one(Tensor::new(x.shape().to_vec(), data)?)
                    }
                }
            }
            Op::Sigmoid => one(g.zip_map(y, |gi, s| gi * s * (T::one() - s))?),
            Op::Relu => one(g.zip_map(input(0), |gi, x| if x > T::zero() { gi } else { T::zero() })?),
            Op::Tanh => one(g.zip_map(y, |gi, t| gi * (T::one() - t * t))?),
            Op::Exp => one(g.zip_map(y, |gi, e| gi * e)?),
            Op::Log => one(g.zip_map(input(0), |gi, x| gi / x)?),
            Op::Sqrt => one(g.zip_map(y, |gi, r| gi / (T::c(2.0) * r))?),
            Op::Softmax { axis } => {
                // dx = y ⊙ (g − Σ_axis g ⊙ y)
                let (outer, extent, inner) = split_axis(y.shape(), *axis);
                if inner == 1 {
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(extent.max(1)).zip(g.data().chunks(extent.max(1))) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                    }
                    return Ok(one(Tensor::new(y.shape().to_vec(), data)?));
                }
                let mut data = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let dot: T = (0..extent).map(|e| g.data()[at(e)] * y.data()[at(e)]).sum();
                        for e in 0..extent {
                            data[at(e)] = y.data()[at(e)] * (g.data()[at(e)] - dot);
                        }
                    }
                }
                one(Tensor::new(y.shape().to_vec(), data)?)
            }
            Op::LayerNorm { eps } => {
                let x = input(0);
                let width = *x.shape().last().expect("checked on forward");
                let inv_w = T::c(1.0 / width as f64);
                let mut data = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(width).zip(y.data().chunks(width)).zip(g.data().chunks(width)) {
                    let (_, inv) = row_moments(xr, *eps);
                    let g_mean: T = gr.iter().copied().sum::<T>() * inv_w;
                    let gy_mean: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
                    data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| inv * (gi - g_mean - yi * gy_mean)));
                }
                one(Tensor::new(x.shape().to_vec(), data)?)
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor<T>> = (0..node.inputs.len()).map(input).collect();
                let grads = op.backward(&inputs, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} returned {} cotangents for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                grads
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| want(i).then_some(t))
                    .collect()
            }
        })
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_moments<T: Element>(row: &[T], eps: f64) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + T::c(eps)).sqrt())
}

pub(crate) fn softmax_along<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    if inner == 1 {
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(extent.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let inv = T::one() / data[start..].iter().copied().sum::<T>();
            data[start..].iter_mut().for_each(|v| *v = *v * inv);
        }
        return Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
    }
    let mut data = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * extent + e) * inner + i;
            let max = (0..extent)
                .map(|e| x.data()[at(e)])
                .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
            let mut total = T::zero();
            for e in 0..extent {
                let v = (x.data()[at(e)] - max).exp();
                data[at(e)] = v;
                total = total + v;
            }
            for e in 0..extent {
                data[at(e)] = data[at(e)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}
