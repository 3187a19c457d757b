//! Central finite-difference gradient oracle.

use super::element::Element;
use super::expr::Expr;
use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar function of a parameter set, recorded onto a graph.
pub trait Objective<T: Element> {
    /// Records the objective; every entry of the parameter set is already
    /// bound on `g` as a named leaf.
    fn build(&self, g: &mut Graph<T>, params: &BoundParams) -> Result<Var>;
}

impl<T, F> Objective<T> for F
where
    T: Element,
    F: Fn(&mut Graph<T>, &BoundParams) -> Result<Var>,
{
    fn build(&self, g: &mut Graph<T>, params: &BoundParams) -> Result<Var> {
        self(g, params)
    }
}

impl<T: Element> Objective<T> for Expr {
    fn build(&self, g: &mut Graph<T>, params: &BoundParams) -> Result<Var> {
        self.record_bound(g, params)
    }
}

fn scalar_of<T: Element>(g: &Graph<T>, v: Var) -> Result<T> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "objective must be scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Forward value of a scalar objective.
pub fn value<T: Element>(obj: &dyn Objective<T>, params: &ParamSet<T>) -> Result<T> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = obj.build(&mut g, &bound)?;
    scalar_of(&g, out)
}

/// Value and gradients of a scalar objective for the named parameters.
/// Parameters the objective never touches get zero gradients.
pub fn value_and_grad<T: Element>(
    obj: &dyn Objective<T>,
    params: &ParamSet<T>,
    wrt: &[&str],
) -> Result<(T, ParamSet<T>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = obj.build(&mut g, &bound)?;
    let v = scalar_of(&g, out)?;
    let grads = g.backward(out, Tensor::ones(g.shape(out).to_vec()))?;
    let mut result = ParamSet::new();
    for name in wrt {
        let var = bound.var(name)?;
        let t = match grads.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros_like(params.get(name)?),
        };
        result.insert(name.to_string(), t);
    }
    Ok((v, result))
}

/// Relative error used by [`finite_diff_check`]:
/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum relative error between the reverse-mode gradient and central
/// differences with step `eps`, over every element of parameter `wrt`.
pub fn finite_diff_check<T: Element>(
    obj: &dyn Objective<T>,
    params: &ParamSet<T>,
    wrt: &str,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let base = params.get(wrt)?;
    let (_, grads) = value_and_grad(obj, params, &[wrt])?;
    let analytic = grads.get(wrt)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let x = base.data()[i];
        probe.get_mut(wrt)?.data_mut()[i] = x + T::c(eps);
        let up = value(obj, &probe)?.f64();
        probe.get_mut(wrt)?.data_mut()[i] = x - T::c(eps);
        let down = value(obj, &probe)?.f64();
        probe.get_mut(wrt)?.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i].f64(), numeric));
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every parameter; returns the worst error and
/// the parameter that produced it.
pub fn finite_diff_check_all<T: Element>(
    obj: &dyn Objective<T>,
    params: &ParamSet<T>,
    eps: f64,
) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for name in params.names() {
        let e = finite_diff_check(obj, params, name, eps)?;
        if e >= worst.0 {
            worst = (e, name.to_string());
        }
    }
    Ok(worst)
}
