//! Neural ODE encoder: transformer dynamics, fixed-grid RK4, adjoint
//! gradients and bidirectional gated fusion.
//!
//! An ODE solve appears on an outer [`Graph`] as one custom node. Its
//! backward pass runs [`adjoint_backward`] instead of replaying the solver's
//! internal operations, so the outer tape never holds per-stage activations.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundParams, CustomOp, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    feed_forward, init_encoder, layer_norm_affine, repeat_rows, reversal_keep_first, self_attention,
    xavier, EncoderVars, ENCODER_TENSORS,
};

pub const DEFAULT_STEPS: usize = 8;

/// Chebyshev points of the second kind on `[-1, 1]` are `cos(jπ/2)`; on any
/// interval they are its endpoints and midpoint.
pub const CHEB_NODES: usize = 3;

/// How the adjoint pass obtains `z(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Interpolate from the three Chebyshev-node snapshots.
    #[default]
    Irdm,
    /// Read the stored forward grid; gradients equal backprop through the
    /// unrolled solver.
    Cached,
}

impl std::str::FromStr for GradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irdm" => Ok(GradMode::Irdm),
            "cached" => Ok(GradMode::Cached),
            other => Err(Error::InvalidArgument(format!("unknown gradient mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub mode: GradMode,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            t0: 0.0,
            t1: 1.0,
            steps: DEFAULT_STEPS,
            mode: GradMode::Irdm,
        }
    }
}

/// Right-hand side `dz/dt = f(z, t, θ)`, recorded onto a graph so that its
/// vector-Jacobian products come from the tape.
pub trait Dynamics<T: Element>: Send + Sync {
    fn record(&self, g: &mut Graph<T>, z: Var, t: f64, theta: &[Var]) -> Result<Var>;
}

/// `f(z, t, θ)` as a value.
pub fn dynamics_eval<T: Element>(
    f: &dyn Dynamics<T>,
    z: &Tensor<T>,
    t: f64,
    theta: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let tv: Vec<Var> = theta.iter().map(|p| g.constant(p.clone())).collect();
    let out = f.record(&mut g, zv, t, &tv)?;
    if g.shape(out) != z.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dynamics map {:?} to {:?}",
            z.shape(),
            g.shape(out)
        )));
    }
    Ok(g.value(out).clone())
}

/// `(aᵀ ∂f/∂z, aᵀ ∂f/∂θ)` at `(z, t)`.
fn dynamics_vjp<T: Element>(
    f: &dyn Dynamics<T>,
    z: &Tensor<T>,
    t: f64,
    theta: &[Tensor<T>],
    a: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let tv: Vec<Var> = theta.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f.record(&mut g, zv, t, &tv)?;
    let mut grads = g.backward(out, a.clone())?;
    let dz = grads.take(zv).unwrap_or_else(|| Tensor::zeros_like(z));
    let dtheta = tv
        .iter()
        .zip(theta)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    Ok((dz, dtheta))
}

/// `dz/dt = z·W` with `θ = [W]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearDynamics;

impl<T: Element> Dynamics<T> for LinearDynamics {
    fn record(&self, g: &mut Graph<T>, z: Var, _t: f64, theta: &[Var]) -> Result<Var> {
        match theta {
            [w] => g.matmul(z, *w),
            _ => Err(Error::ShapeMismatch(format!("linear dynamics take 1 tensor, got {}", theta.len()))),
        }
    }
}

/// Names of the dynamics tensors, in the order [`TransformerDynamics`]
/// expects them.
pub const DYNAMICS_TENSORS: [&str; 13] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "ff.w1",
    "ff.b1", "ff.w2", "ff.b2", "time",
];

/// Attention and feed-forward updates of a pre-norm encoder block, without
/// the identity paths: with `x = z + t·τ` and `a = MHA(LN₁(x))`,
/// `f = a + FFN(LN₂(x + a))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerDynamics {
    pub heads: usize,
}

impl<T: Element> Dynamics<T> for TransformerDynamics {
    fn record(&self, g: &mut Graph<T>, z: Var, t: f64, theta: &[Var]) -> Result<Var> {
        if theta.len() != DYNAMICS_TENSORS.len() {
            return Err(Error::ShapeMismatch(format!(
                "transformer dynamics take {} tensors, got {}",
                DYNAMICS_TENSORS.len(),
                theta.len()
            )));
        }
        let p = EncoderVars::from_slice(&theta[..ENCODER_TENSORS.len()])?;
        let n = g.value(z).dims2()?.0;
        let tau = g.scale(theta[12], t)?;
        let tau = repeat_rows(g, tau, n)?;
        let x = g.add(z, tau)?;
        let u = layer_norm_affine(g, x, p.ln1_g, p.ln1_b)?;
        let a = self_attention(g, u, p.wq, p.wk, p.wv, p.wo, self.heads)?;
        let xa = g.add(x, a)?;
        let v = layer_norm_affine(g, xa, p.ln2_g, p.ln2_b)?;
        let ff = feed_forward(g, v, &p)?;
        g.add(a, ff)
    }
}

/// Gain applied to the Xavier init of the attention output and second
/// feed-forward projections, so an untrained field moves states gently and
/// three snapshots describe the trajectory well.
pub const DYNAMICS_OUTPUT_GAIN: f64 = 0.1;

/// Initializes one direction's dynamics under `prefix`.
pub fn init_dynamics<T: Element>(params: &mut ParamSet<T>, rng: &mut impl Rng, prefix: &str, d: usize, ff: usize) {
    init_encoder(params, rng, prefix, d, ff);
    for name in ["attn.wo", "ff.w2"] {
        let t = params.get_mut(&format!("{prefix}.{name}")).expect("just inserted");
        *t = t.scale(T::c(DYNAMICS_OUTPUT_GAIN));
    }
    params.insert(format!("{prefix}.time"), Tensor::zeros([1, d]));
}

/// Handles of `{prefix}.*` in [`DYNAMICS_TENSORS`] order.
pub fn dynamics_vars(bound: &BoundParams, prefix: &str) -> Result<Vec<Var>> {
    DYNAMICS_TENSORS
        .iter()
        .map(|s| bound.var(&format!("{prefix}.{s}")))
        .collect()
}

/// Tensors of `{prefix}.*` in [`DYNAMICS_TENSORS`] order.
pub fn dynamics_tensors<T: Element>(params: &ParamSet<T>, prefix: &str) -> Result<Vec<Tensor<T>>> {
    DYNAMICS_TENSORS
        .iter()
        .map(|s| params.get(&format!("{prefix}.{s}")).cloned())
        .collect()
}

/// States of one solve.
#[derive(Clone, Debug)]
pub struct ODETrajectory<T: Element> {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    /// `z(t0 + i·h)` for `i = 0..=steps`; empty after [`Self::snapshots_only`].
    pub grid: Vec<Tensor<T>>,
    /// Chebyshev nodes in increasing order.
    pub cheb_ts: [f64; CHEB_NODES],
    pub cheb: Vec<Tensor<T>>,
}

impl<T: Element> ODETrajectory<T> {
    pub fn h(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// `z(t1)`.
    pub fn final_state(&self) -> &Tensor<T> {
        &self.cheb[CHEB_NODES - 1]
    }

    pub fn has_grid(&self) -> bool {
        self.grid.len() == self.steps + 1
    }

    /// Drops the grid, keeping only the Chebyshev snapshots.
    pub fn snapshots_only(mut self) -> Self {
        self.grid = Vec::new();
        self
    }
}

/// Chebyshev points of the second kind mapped onto `[t0, t1]`, ascending.
pub fn cheb_nodes(t0: f64, t1: f64) -> [f64; CHEB_NODES] {
    let mut ts = [0.0; CHEB_NODES];
    let m = (CHEB_NODES - 1) as f64;
    for (j, t) in ts.iter_mut().enumerate() {
        // cos(jπ/m) written as a sine so the middle node is exactly 0.
        let x = (std::f64::consts::PI * (m - 2.0 * j as f64) / (2.0 * m)).sin();
        *t = (t0 + t1) / 2.0 - x * (t1 - t0) / 2.0;
    }
    ts[0] = t0;
    ts[CHEB_NODES - 1] = t1;
    ts
}

/// Barycentric weights `1 / Π_{k≠j}(t_j − t_k)`.
fn barycentric_weights(ts: &[f64]) -> Result<Vec<f64>> {
    let mut w = vec![1.0; ts.len()];
    for j in 0..ts.len() {
        for k in 0..ts.len() {
            if j != k {
                let d = ts[j] - ts[k];
                if d == 0.0 || !d.is_finite() {
                    return Err(Error::DegenerateNodes);
                }
                w[j] /= d;
            }
        }
    }
    Ok(w)
}

/// Second-form barycentric interpolation through `(ts[j], vals[j])`.
/// A node hit returns that node's value unchanged.
pub fn barycentric_interpolate<T: Element>(ts: &[f64], vals: &[&Tensor<T>], t: f64) -> Result<Tensor<T>> {
    if ts.is_empty() || ts.len() != vals.len() {
        return Err(Error::ShapeMismatch(format!("{} nodes, {} values", ts.len(), vals.len())));
    }
    let w = barycentric_weights(ts)?;
    if let Some(j) = ts.iter().position(|&tj| tj == t) {
        return Ok(vals[j].clone());
    }
    let coef: Vec<f64> = ts.iter().zip(&w).map(|(&tj, &wj)| wj / (t - tj)).collect();
    let denom: f64 = coef.iter().sum();
    let mut out = Tensor::zeros_like(vals[0]);
    for (c, v) in coef.iter().zip(vals) {
        out.axpy(T::c(c / denom), v)?;
    }
    Ok(out)
}

/// Interpolates the three Chebyshev snapshots at `t` inside their hull.
pub fn barycentric_eval<T: Element>(node_ts: &[f64], node_vals: &[Tensor<T>], t: f64) -> Result<Tensor<T>> {
    if node_ts.len() != CHEB_NODES {
        return Err(Error::ShapeMismatch(format!(
            "expected {CHEB_NODES} nodes, got {}",
            node_ts.len()
        )));
    }
    let lo = node_ts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = node_ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-12 * (hi - lo).abs().max(1.0);
    if !(t >= lo - slack && t <= hi + slack) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [{lo}, {hi}]")));
    }
    let refs: Vec<&Tensor<T>> = node_vals.iter().collect();
    barycentric_interpolate(node_ts, &refs, t)
}

fn check_finite<T: Element>(z: &Tensor<T>, t: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState(t))
    }
}

fn lincomb<T: Element>(base: &Tensor<T>, c: f64, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = base.clone();
    out.axpy(T::c(c), k)?;
    Ok(out)
}

/// Classic RK4 with `steps` uniform steps on `[t0, t1]`.
pub fn rk4_integrate<T: Element>(
    f: &dyn Dynamics<T>,
    z0: &Tensor<T>,
    theta: &[Tensor<T>],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<ODETrajectory<T>> {
    if steps == 0 || !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "need steps ≥ 1 and t1 > t0, got steps={steps}, [{t0}, {t1}]"
        )));
    }
    check_finite(z0, t0)?;
    let h = (t1 - t0) / steps as f64;
    let mut grid = Vec::with_capacity(steps + 1);
    grid.push(z0.clone());
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let z = &grid[i];
        let k1 = dynamics_eval(f, z, t, theta)?;
        let k2 = dynamics_eval(f, &lincomb(z, h / 2.0, &k1)?, t + h / 2.0, theta)?;
        let k3 = dynamics_eval(f, &lincomb(z, h / 2.0, &k2)?, t + h / 2.0, theta)?;
        let k4 = dynamics_eval(f, &lincomb(z, h, &k3)?, t + h, theta)?;
        let mut next = z.clone();
        next.axpy(T::c(h / 6.0), &k1)?;
        next.axpy(T::c(h / 3.0), &k2)?;
        next.axpy(T::c(h / 3.0), &k3)?;
        next.axpy(T::c(h / 6.0), &k4)?;
        check_finite(&next, t + h)?;
        grid.push(next);
    }
    let cheb_ts = cheb_nodes(t0, t1);
    let cheb = cheb_ts
        .iter()
        .map(|&t| grid_state_at(&grid, t0, h, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ODETrajectory {
        t0,
        t1,
        steps,
        grid,
        cheb_ts,
        cheb,
    })
}

/// Grid state at `t`: exact on grid points, otherwise a cubic barycentric
/// interpolant through the four nearest grid states.
fn grid_state_at<T: Element>(grid: &[Tensor<T>], t0: f64, h: f64, t: f64) -> Result<Tensor<T>> {
    let pos = (t - t0) / h;
    let nearest = pos.round();
    let last = grid.len() - 1;
    if (pos - nearest).abs() < 1e-9 {
        return Ok(grid[(nearest as usize).min(last)].clone());
    }
    let width = grid.len().min(4);
    let start = (pos.floor() as isize - 1).clamp(0, (grid.len() - width) as isize) as usize;
    let ts: Vec<f64> = (start..start + width).map(|i| t0 + i as f64 * h).collect();
    let vals: Vec<&Tensor<T>> = grid[start..start + width].iter().collect();
    barycentric_interpolate(&ts, &vals, t)
}

fn check_theta_shapes<T: Element>(theta: &[Tensor<T>], like: &[Tensor<T>]) -> Result<()> {
    if theta.len() != like.len() {
        return Err(Error::TrajectoryMismatch(format!("{} parameter tensors, expected {}", theta.len(), like.len())));
    }
    Ok(())
}

/// Gradients of a loss through one solve, given `dL/dz(t1)`.
///
/// Returns `(dL/dθ, dL/dz0)`. `Cached` runs the exact adjoint of the discrete
/// RK4 map, recomputing each step's stages from the stored grid. `Irdm`
/// integrates `da/dt = −aᵀ∂f/∂z`, `dθ̄/dt = −aᵀ∂f/∂θ` backward with RK4 on
/// the same grid, reconstructing `z(t)` from the Chebyshev snapshots.
pub fn adjoint_backward<T: Element>(
    traj: &ODETrajectory<T>,
    f: &dyn Dynamics<T>,
    theta: &[Tensor<T>],
    dl_dz1: &Tensor<T>,
    mode: GradMode,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    if traj.cheb.len() != CHEB_NODES || traj.steps == 0 {
        return Err(Error::TrajectoryMismatch("trajectory has no snapshots".into()));
    }
    if dl_dz1.shape() != traj.final_state().shape() {
        return Err(Error::TrajectoryMismatch(format!(
            "seed {:?} for state {:?}",
            dl_dz1.shape(),
            traj.final_state().shape()
        )));
    }
    match mode {
        GradMode::Cached => discrete_adjoint(traj, f, theta, dl_dz1),
        GradMode::Irdm => continuous_adjoint(traj, f, theta, dl_dz1),
    }
}

fn accumulate<T: Element>(acc: &mut [Tensor<T>], c: f64, add: &[Tensor<T>]) -> Result<()> {
    check_theta_shapes(add, acc)?;
    for (a, b) in acc.iter_mut().zip(add) {
        a.axpy(T::c(c), b)?;
    }
    Ok(())
}

fn discrete_adjoint<T: Element>(
    traj: &ODETrajectory<T>,
    f: &dyn Dynamics<T>,
    theta: &[Tensor<T>],
    dl_dz1: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    if !traj.has_grid() {
        return Err(Error::TrajectoryMismatch(format!(
            "cached mode needs {} grid states, trajectory has {}",
            traj.steps + 1,
            traj.grid.len()
        )));
    }
    let h = traj.h();
    let mut a = dl_dz1.clone();
    let mut dtheta: Vec<Tensor<T>> = theta.iter().map(Tensor::zeros_like).collect();
    for i in (0..traj.steps).rev() {
        let t = traj.t0 + i as f64 * h;
        let z = &traj.grid[i];
        let k1 = dynamics_eval(f, z, t, theta)?;
        let z2 = lincomb(z, h / 2.0, &k1)?;
        let k2 = dynamics_eval(f, &z2, t + h / 2.0, theta)?;
        let z3 = lincomb(z, h / 2.0, &k2)?;
        let k3 = dynamics_eval(f, &z3, t + h / 2.0, theta)?;
        let z4 = lincomb(z, h, &k3)?;

        // Stage cotangents, from the last stage back to the first.
        let mut za = a.clone();
        let kb4 = a.scale(T::c(h / 6.0));
        let (zb4, tb4) = dynamics_vjp(f, &z4, t + h, theta, &kb4)?;
        accumulate(&mut dtheta, 1.0, &tb4)?;
        za.add_assign(&zb4)?;
        let kb3 = lincomb(&a.scale(T::c(h / 3.0)), h, &zb4)?;
        let (zb3, tb3) = dynamics_vjp(f, &z3, t + h / 2.0, theta, &kb3)?;
        accumulate(&mut dtheta, 1.0, &tb3)?;
        za.add_assign(&zb3)?;
        let kb2 = lincomb(&a.scale(T::c(h / 3.0)), h / 2.0, &zb3)?;
        let (zb2, tb2) = dynamics_vjp(f, &z2, t + h / 2.0, theta, &kb2)?;
        accumulate(&mut dtheta, 1.0, &tb2)?;
        za.add_assign(&zb2)?;
        let kb1 = lincomb(&a.scale(T::c(h / 6.0)), h / 2.0, &zb2)?;
        let (zb1, tb1) = dynamics_vjp(f, z, t, theta, &kb1)?;
        accumulate(&mut dtheta, 1.0, &tb1)?;
        za.add_assign(&zb1)?;
        check_finite(&za, t)?;
        a = za;
    }
    Ok((dtheta, a))
}

fn continuous_adjoint<T: Element>(
    traj: &ODETrajectory<T>,
    f: &dyn Dynamics<T>,
    theta: &[Tensor<T>],
    dl_dz1: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let h = traj.h();
    let stage = |t: f64, a: &Tensor<T>| -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let z = barycentric_eval(&traj.cheb_ts, &traj.cheb, t)?;
        dynamics_vjp(f, &z, t, theta, a)
    };
    let mut a = dl_dz1.clone();
    let mut dtheta: Vec<Tensor<T>> = theta.iter().map(Tensor::zeros_like).collect();
    for i in (0..traj.steps).rev() {
        // Step from t = t_{i+1} down to t_i, in reversed time s = t1 − t.
        let t = traj.t0 + (i + 1) as f64 * h;
        let (k1, p1) = stage(t, &a)?;
        let (k2, p2) = stage(t - h / 2.0, &lincomb(&a, h / 2.0, &k1)?)?;
        let (k3, p3) = stage(t - h / 2.0, &lincomb(&a, h / 2.0, &k2)?)?;
        let (k4, p4) = stage(t - h, &lincomb(&a, h, &k3)?)?;
        a.axpy(T::c(h / 6.0), &k1)?;
        a.axpy(T::c(h / 3.0), &k2)?;
        a.axpy(T::c(h / 3.0), &k3)?;
        a.axpy(T::c(h / 6.0), &k4)?;
        accumulate(&mut dtheta, h / 6.0, &p1)?;
        accumulate(&mut dtheta, h / 3.0, &p2)?;
        accumulate(&mut dtheta, h / 3.0, &p3)?;
        accumulate(&mut dtheta, h / 6.0, &p4)?;
        check_finite(&a, t - h)?;
    }
    Ok((dtheta, a))
}

/// The solve as a tape node with inputs `[z0, θ...]`.
struct OdeSolveOp<T: Element> {
    f: Arc<dyn Dynamics<T>>,
    traj: ODETrajectory<T>,
    mode: GradMode,
}

impl<T: Element> CustomOp<T> for OdeSolveOp<T> {
    fn name(&self) -> &str {
        "ode-solve"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let theta: Vec<Tensor<T>> = inputs[1..].iter().map(|t| (*t).clone()).collect();
        let (dtheta, dz0) = adjoint_backward(&self.traj, self.f.as_ref(), &theta, grad_output, self.mode)?;
        let mut out = Vec::with_capacity(inputs.len());
        out.push(dz0);
        out.extend(dtheta);
        Ok(out)
    }
}

/// Records `z(t1)` of the solve started at `z0` as a single node whose
/// gradient comes from the adjoint pass.
pub fn record_ode_solve<T: Element>(
    g: &mut Graph<T>,
    f: Arc<dyn Dynamics<T>>,
    z0: Var,
    theta: &[Var],
    cfg: &OdeConfig,
) -> Result<Var> {
    let theta_vals: Vec<Tensor<T>> = theta.iter().map(|&v| g.value(v).clone()).collect();
    let traj = rk4_integrate(f.as_ref(), g.value(z0), &theta_vals, cfg.t0, cfg.t1, cfg.steps)?;
    let traj = match cfg.mode {
        GradMode::Irdm => traj.snapshots_only(),
        GradMode::Cached => traj,
    };
    let out = traj.final_state().clone();
    let mut inputs = vec![z0];
    inputs.extend_from_slice(theta);
    let op = OdeSolveOp { f, traj, mode: cfg.mode };
    g.custom(Arc::new(op), &inputs, out)
}

/// Records RK4 stage by stage with tape primitives. Backprop through this
/// is the reference for the adjoint pass.
pub fn record_rk4_unrolled<T: Element>(
    g: &mut Graph<T>,
    f: &dyn Dynamics<T>,
    z0: Var,
    theta: &[Var],
    cfg: &OdeConfig,
) -> Result<Var> {
    let h = (cfg.t1 - cfg.t0) / cfg.steps as f64;
    let mut z = z0;
    for i in 0..cfg.steps {
        let t = cfg.t0 + i as f64 * h;
        let k1 = f.record(g, z, t, theta)?;
        let s = g.scale(k1, h / 2.0)?;
        let z2 = g.add(z, s)?;
        let k2 = f.record(g, z2, t + h / 2.0, theta)?;
        let s = g.scale(k2, h / 2.0)?;
        let z3 = g.add(z, s)?;
        let k3 = f.record(g, z3, t + h / 2.0, theta)?;
        let s = g.scale(k3, h)?;
        let z4 = g.add(z, s)?;
        let k4 = f.record(g, z4, t + h, theta)?;
        let mut acc = z;
        for (k, c) in [(k1, h / 6.0), (k2, h / 3.0), (k3, h / 3.0), (k4, h / 6.0)] {
            let s = g.scale(k, c)?;
            acc = g.add(acc, s)?;
        }
        z = acc;
    }
    Ok(z)
}

/// Gate projections `f′`, `f″` (both `d×d`, no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T: Element> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
}

impl<T: Element> GateParams<T> {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        GateParams {
            f1: xavier(rng, d, d),
            f2: xavier(rng, d, d),
        }
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(format!("{prefix}.f1"), self.f1.clone());
        params.insert(format!("{prefix}.f2"), self.f2.clone());
    }
}

/// Graph handles for one bidirectional encoder.
#[derive(Clone, Debug)]
pub struct BidirectionalVars {
    pub fwd: Vec<Var>,
    /// Equal to `fwd` when the directions share parameters.
    pub bwd: Vec<Var>,
    pub gate_f1: Var,
    pub gate_f2: Var,
}

impl BidirectionalVars {
    /// Reads `{prefix}.fwd.*`, `{prefix}.bwd.*` (or `fwd` again when `tied`)
    /// and `{prefix}.gate.f1/f2`.
    pub fn from_bound(bound: &BoundParams, prefix: &str, tied: bool) -> Result<Self> {
        let fwd = dynamics_vars(bound, &format!("{prefix}.fwd"))?;
        let bwd = if tied {
            fwd.clone()
        } else {
            dynamics_vars(bound, &format!("{prefix}.bwd"))?
        };
        Ok(BidirectionalVars {
            fwd,
            bwd,
            gate_f1: bound.var(&format!("{prefix}.gate.f1"))?,
            gate_f2: bound.var(&format!("{prefix}.gate.f2"))?,
        })
    }
}

/// Initializes the parameters read by [`BidirectionalVars::from_bound`].
pub fn init_bidirectional<T: Element>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    ff: usize,
    tied: bool,
) {
    init_dynamics(params, rng, &format!("{prefix}.fwd"), d, ff);
    if !tied {
        init_dynamics(params, rng, &format!("{prefix}.bwd"), d, ff);
    }
    GateParams::init(rng, d).insert_into(params, &format!("{prefix}.gate"));
}

/// Intermediate values of one bidirectional pass.
#[derive(Clone, Copy, Debug)]
pub struct BidirectionalOut {
    pub z_fwd: Var,
    /// Backward-direction state, already restored to input token order.
    pub z_bwd: Var,
    pub gate: Var,
    pub h: Var,
}

/// Forward solve on `tokens`, backward solve on the tokens reversed with
/// row 0 held in place, then `g = σ(z_f F′ + z_b F″)`,
/// `h = σ(g ⊙ z_f + (1 − g) ⊙ z_b)`.
pub fn record_bidirectional<T: Element>(
    g: &mut Graph<T>,
    f: Arc<dyn Dynamics<T>>,
    tokens: Var,
    vars: &BidirectionalVars,
    cfg: &OdeConfig,
) -> Result<BidirectionalOut> {
    let n = g.value(tokens).dims2()?.0;
    let z_fwd = record_ode_solve(g, f.clone(), tokens, &vars.fwd, cfg)?;
    let rev = g.constant(reversal_keep_first(n));
    let reversed = g.matmul(rev, tokens)?;
    let zb = record_ode_solve(g, f, reversed, &vars.bwd, cfg)?;
    let z_bwd = g.matmul(rev, zb)?;
    let a = g.matmul(z_fwd, vars.gate_f1)?;
    let b = g.matmul(z_bwd, vars.gate_f2)?;
    let pre = g.add(a, b)?;
    let gate = g.sigmoid(pre)?;
    // g⊙z_f + (1−g)⊙z_b = z_b + g⊙(z_f − z_b)
    let diff = g.sub(z_fwd, z_bwd)?;
    let mix = g.mul(gate, diff)?;
    let mix = g.add(z_bwd, mix)?;
    let h = g.sigmoid(mix)?;
    Ok(BidirectionalOut { z_fwd, z_bwd, gate, h })
}

/// Value form of [`record_bidirectional`] with transformer dynamics.
pub fn bidirectional_encode<T: Element>(
    tokens: &Tensor<T>,
    fwd: &[Tensor<T>],
    bwd: &[Tensor<T>],
    gate: &GateParams<T>,
    heads: usize,
    cfg: &OdeConfig,
) -> Result<Tensor<T>> {
    if !tokens.is_finite() {
        return Err(Error::NonFiniteState(cfg.t0));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let vars = BidirectionalVars {
        fwd: fwd.iter().map(|t| g.constant(t.clone())).collect(),
        bwd: bwd.iter().map(|t| g.constant(t.clone())).collect(),
        gate_f1: g.constant(gate.f1.clone()),
        gate_f2: g.constant(gate.f2.clone()),
    };
    let out = record_bidirectional(&mut g, Arc::new(TransformerDynamics { heads }), x, &vars, cfg)?;
    Ok(g.value(out.h).clone())
}
