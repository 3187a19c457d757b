//! Reverse-mode differentiation on the tape: a two-layer perceptron loss,
//! its gradients, and a finite-difference check of every parameter.

use multifusion::diffcore::{finite_diff_check_all, value_and_grad, BoundParams, Graph, ParamSet, Tensor};
use multifusion::nn::{self, uniform};

fn main() -> multifusion::Result<()> {
    let mut r = nn::rng(0);
    let mut params = ParamSet::new();
    params.insert("w1", uniform::<f64>(&mut r, &[3, 5], 0.8));
    params.insert("w2", uniform::<f64>(&mut r, &[5, 2], 0.8));
    let x: Tensor<f64> = uniform(&mut r, &[4, 3], 1.0);
    let targets = [0, 1, 1, 0];

    let objective = move |g: &mut Graph<f64>, b: &BoundParams| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, b.var("w1")?)?;
        let h = g.tanh(h)?;
        let logits = g.matmul(h, b.var("w2")?)?;
        let probs = g.softmax(logits, 1)?;
        nn::cross_entropy(g, probs, &targets)
    };

    let (loss, grads) = value_and_grad(&objective, &params, &["w1", "w2"])?;
    println!("loss = {loss:.6}");
    for (name, g) in grads.iter() {
        println!("d loss / d {name}: shape {:?}, max |g| = {:.4}", g.shape(), g.max_abs());
    }
    let (worst, at) = finite_diff_check_all(&objective, &params, 1e-6)?;
    println!("finite differences: worst relative error {worst:.2e} at `{at}`");
    Ok(())
}
