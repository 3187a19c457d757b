//! Neural ODE machinery: RK4 convergence on exponential decay, adjoint
//! gradients (exact discrete and snapshot-interpolated) against backprop
//! through the unrolled solver, and the bidirectional encoder.

use multifusion::diffcore::{Graph, ParamSet, Tensor, Var};
use multifusion::nn::{self, uniform};
use multifusion::odeflow::{
    adjoint_backward, bidirectional_encode, dynamics_tensors, init_dynamics, record_rk4_unrolled, rk4_integrate, GateParams,
    GradMode, LinearDynamics, OdeConfig, TransformerDynamics,
};

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let n: f64 = b.data().iter().map(|y| y * y).sum();
    (d / n.max(1e-300)).sqrt()
}

fn main() -> multifusion::Result<()> {
    let decay = [Tensor::<f64>::from_f64([1, 1], &[-1.0])?];
    let z0 = Tensor::<f64>::ones([1, 1]);
    let mut prev = None;
    for steps in [4, 8, 16, 32] {
        let z1 = rk4_integrate(&LinearDynamics, &z0, &decay, 0.0, 1.0, steps)?.final_state().data()[0];
        let err = (z1 - (-1.0f64).exp()).abs();
        let order = prev.map_or(String::new(), |p: f64| format!(", observed order {:.2}", (p / err).log2()));
        println!("{steps:2} steps: |z(1) - 1/e| = {err:.3e}{order}");
        prev = Some(err);
    }

    let d = 8;
    let mut r = nn::rng(2);
    let mut ps = ParamSet::new();
    init_dynamics(&mut ps, &mut r, "f", d, 2 * d);
    let theta = dynamics_tensors(&ps, "f")?;
    let z0: Tensor<f64> = uniform(&mut r, &[6, d], 1.0);
    let seed: Tensor<f64> = uniform(&mut r, &[6, d], 1.0);
    let f = TransformerDynamics { heads: 2 };
    let traj = rk4_integrate(&f, &z0, &theta, 0.0, 1.0, 8)?;
    let (_, dz_cached) = adjoint_backward(&traj, &f, &theta, &seed, GradMode::Cached)?;
    let (_, dz_irdm) = adjoint_backward(&traj.clone().snapshots_only(), &f, &theta, &seed, GradMode::Irdm)?;

    let mut g = Graph::new();
    let zv = g.leaf(z0.clone());
    let tv: Vec<Var> = theta.iter().map(|t| g.leaf(t.clone())).collect();
    let cfg = OdeConfig { steps: 8, mode: GradMode::Cached, ..OdeConfig::default() };
    let out = record_rk4_unrolled(&mut g, &f, zv, &tv, &cfg)?;
    let grads = g.backward(out, seed)?;
    let dz_unrolled = grads.get(zv).expect("z0 reaches the output");
    println!("dL/dz0: cached vs unrolled {:.2e}, snapshots vs cached {:.2e}", rel(&dz_cached, dz_unrolled), rel(&dz_irdm, &dz_cached));

    let mut bwd = ParamSet::new();
    init_dynamics(&mut bwd, &mut r, "b", d, 2 * d);
    let h = bidirectional_encode(&z0, &theta, &dynamics_tensors(&bwd, "b")?, &GateParams::init(&mut r, d), 2, &OdeConfig::default())?;
    println!("bidirectional output {:?}, values in ({:.3}, {:.3})", h.shape(),
        h.data().iter().copied().fold(f64::INFINITY, f64::min),
        h.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    Ok(())
}
