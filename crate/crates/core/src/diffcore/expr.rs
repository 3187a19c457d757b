//! Symbolic expressions over named leaves.
//!
//! An [`Expr`] is an immutable DAG; shared sub-expressions (cloned handles)
//! are evaluated once per call. Evaluation replays the DAG onto a fresh
//! [`Graph`], so `eval` and `grad` share one implementation of every
//! primitive.

use std::collections::HashMap;
use std::sync::Arc;

use super::element::Element;
use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Prim {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat(usize),
    Slice(usize, usize, usize),
    Reshape(Vec<usize>),
    Sum(Option<usize>),
    Mean(Option<usize>),
    Sigmoid,
    Relu,
    Tanh,
    Softmax(usize),
    Exp,
    Log,
    Sqrt,
    LayerNorm(f64),
}

#[derive(Debug)]
enum Node {
    Leaf(String),
    Const(Tensor<f64>),
    Apply(Prim, Vec<Expr>),
}

/// Handle to an expression node. Cheap to clone; clones share the node.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

macro_rules! unary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        $(pub fn $name(&self) -> Expr { self.apply($prim, vec![]) })*
    };
}

macro_rules! binary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        $(pub fn $name(&self, other: &Expr) -> Expr { self.apply($prim, vec![other.clone()]) })*
    };
}

impl Expr {
    pub fn leaf(name: impl Into<String>) -> Expr {
        Expr(Arc::new(Node::Leaf(name.into())))
    }

    /// Constant stored in 64-bit; cast to the evaluation dtype on use.
    pub fn constant(t: Tensor<f64>) -> Expr {
        Expr(Arc::new(Node::Const(t)))
    }

    fn apply(&self, p: Prim, rest: Vec<Expr>) -> Expr {
        let mut args = vec![self.clone()];
        args.extend(rest);
        Expr(Arc::new(Node::Apply(p, args)))
    }

    binary! {
        matmul => Prim::MatMul,
        add => Prim::Add,
        sub => Prim::Sub,
        mul => Prim::Mul,
    }

    unary! {
        transpose => Prim::Transpose,
        sigmoid => Prim::Sigmoid,
        relu => Prim::Relu,
        tanh => Prim::Tanh,
        exp => Prim::Exp,
        log => Prim::Log,
        sqrt => Prim::Sqrt,
    }

    pub fn scale(&self, s: f64) -> Expr {
        self.apply(Prim::Scale(s), vec![])
    }

    pub fn concat(parts: &[Expr], axis: usize) -> Expr {
        Expr(Arc::new(Node::Apply(Prim::Concat(axis), parts.to_vec())))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Expr {
        self.apply(Prim::Slice(axis, start, end), vec![])
    }

    pub fn reshape(&self, shape: &[usize]) -> Expr {
        self.apply(Prim::Reshape(shape.to_vec()), vec![])
    }

    pub fn sum(&self, axis: Option<usize>) -> Expr {
        self.apply(Prim::Sum(axis), vec![])
    }

    pub fn mean(&self, axis: Option<usize>) -> Expr {
        self.apply(Prim::Mean(axis), vec![])
    }

    pub fn softmax(&self, axis: usize) -> Expr {
        self.apply(Prim::Softmax(axis), vec![])
    }

    pub fn layer_norm(&self, eps: f64) -> Expr {
        self.apply(Prim::LayerNorm(eps), vec![])
    }

    /// Names of every leaf reachable from this node, sorted and deduplicated.
    pub fn leaves(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        while let Some(e) = stack.pop() {
            if !seen.insert(Arc::as_ptr(&e.0)) {
                continue;
            }
            match &*e.0 {
                Node::Leaf(n) => out.push(n.clone()),
                Node::Const(_) => {}
                Node::Apply(_, args) => stack.extend(args.iter().cloned()),
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Replays the expression onto `g`, binding leaves from `bindings`.
    /// Returns the output handle and the handle of every bound leaf.
    pub fn record<T: Element>(
        &self,
        g: &mut Graph<T>,
        bindings: &ParamSet<T>,
    ) -> Result<(Var, HashMap<String, Var>)> {
        let mut leaves: HashMap<String, Var> = HashMap::new();
        let mut resolve = |name: &str, g: &mut Graph<T>| -> Result<Var> {
            if let Some(&v) = leaves.get(name) {
                return Ok(v);
            }
            let t = bindings
                .get(name)
                .map_err(|_| Error::UnboundLeaf(name.to_string()))?
                .clone();
            let v = g.param(name, t);
            leaves.insert(name.to_string(), v);
            Ok(v)
        };
        let out = self.record_into(g, &mut HashMap::new(), &mut resolve)?;
        Ok((out, leaves))
    }

    /// Replays the expression onto `g` using leaves that are already bound.
    pub fn record_bound<T: Element>(&self, g: &mut Graph<T>, bound: &BoundParams) -> Result<Var> {
        let mut resolve = |name: &str, _: &mut Graph<T>| -> Result<Var> {
            bound.var(name).map_err(|_| Error::UnboundLeaf(name.to_string()))
        };
        self.record_into(g, &mut HashMap::new(), &mut resolve)
    }

    fn record_into<T: Element>(
        &self,
        g: &mut Graph<T>,
        memo: &mut HashMap<*const Node, Var>,
        resolve: &mut dyn FnMut(&str, &mut Graph<T>) -> Result<Var>,
    ) -> Result<Var> {
        let key = Arc::as_ptr(&self.0);
        if let Some(&v) = memo.get(&key) {
            return Ok(v);
        }
        let v = match &*self.0 {
            Node::Leaf(name) => resolve(name, g)?,
            Node::Const(t) => g.constant(t.cast()),
            Node::Apply(p, args) => {
                let mut vs = Vec::with_capacity(args.len());
                for a in args {
                    vs.push(a.record_into(g, memo, resolve)?);
                }
                match p {
                    Prim::MatMul => g.matmul(vs[0], vs[1])?,
                    Prim::Transpose => g.transpose(vs[0])?,
                    Prim::Add => g.add(vs[0], vs[1])?,
                    Prim::Sub => g.sub(vs[0], vs[1])?,
                    Prim::Mul => g.mul(vs[0], vs[1])?,
                    Prim::Scale(s) => g.scale(vs[0], *s)?,
                    Prim::Concat(axis) => g.concat(&vs, *axis)?,
                    Prim::Slice(axis, s, e) => g.slice(vs[0], *axis, *s, *e)?,
                    Prim::Reshape(shape) => g.reshape(vs[0], shape)?,
                    Prim::Sum(axis) => g.sum(vs[0], *axis)?,
                    Prim::Mean(axis) => g.mean(vs[0], *axis)?,
                    Prim::Sigmoid => g.sigmoid(vs[0])?,
                    Prim::Relu => g.relu(vs[0])?,
                    Prim::Tanh => g.tanh(vs[0])?,
                    Prim::Softmax(axis) => g.softmax(vs[0], *axis)?,
                    Prim::Exp => g.exp(vs[0])?,
                    Prim::Log => g.log(vs[0])?,
                    Prim::Sqrt => g.sqrt(vs[0])?,
                    Prim::LayerNorm(eps) => g.layer_norm(vs[0], *eps)?,
                }
            }
        };
        memo.insert(key, v);
        Ok(v)
    }
}

/// Forward value of `expr` under `bindings`.
pub fn eval<T: Element>(expr: &Expr, bindings: &ParamSet<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (out, _) = expr.record(&mut g, bindings)?;
    Ok(g.value(out).clone())
}

/// Vector-Jacobian products of `expr` for the leaves named in `wrt`.
///
/// `seed` defaults to `[1]` for scalar expressions. Requested leaves the
/// expression does not depend on get zero tensors; names absent from
/// `bindings` are an error.
pub fn grad<T: Element>(
    expr: &Expr,
    bindings: &ParamSet<T>,
    wrt: &[&str],
    seed: Option<Tensor<T>>,
) -> Result<ParamSet<T>> {
    for name in wrt {
        bindings.get(name)?;
    }
    let mut g = Graph::new();
    let (out, leaves) = expr.record(&mut g, bindings)?;
    let seed = match seed {
        Some(s) => s,
        None if g.value(out).len() == 1 => Tensor::ones(g.shape(out).to_vec()),
        None => {
            return Err(Error::ShapeMismatch(format!(
                "non-scalar output {:?} needs an explicit seed",
                g.shape(out)
            )))
        }
    };
    let grads = g.backward(out, seed)?;
    let mut result = ParamSet::new();
    for name in wrt {
        let t = match leaves.get(*name).and_then(|v| grads.get(*v)) {
            Some(t) => t.clone(),
            None => Tensor::zeros_like(bindings.get(name)?),
        };
        result.insert(name.to_string(), t);
    }
    Ok(result)
}
