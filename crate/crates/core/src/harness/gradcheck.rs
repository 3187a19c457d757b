use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{finite_diff_check, BoundParams, Graph, Objective, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusionhead::{self, FusionConfig, FusionParams, FusionVars};
use crate::hnf::{self, HnfConfig, ScaleSpec};
use crate::nn::{self, uniform};
use crate::odeflow::{init_bidirectional, record_bidirectional, BidirectionalVars, GradMode, OdeConfig, TransformerDynamics};
use crate::textknow::{self, LmConfig, SmallLm, MATCH_NAME, POOL_NAME};
use crate::visiongraph::{self, ChebFilterBank};

/// Modules with trainable parameters, in dependency order.
pub const GRADCHECK_MODULES: [&str; 5] = ["visiongraph", "odeflow", "hnf", "textknow", "fusionhead"];
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference steps. Each tensor reports its smallest error: large
/// steps lose accuracy when they straddle a ReLU kink, small ones when
/// roundoff swamps gradient entries near 1e-9. A wrong gradient fails all.
pub const GRADCHECK_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub module: String,
    pub seed: u64,
    /// Largest relative error over all checked tensors.
    pub worst: f64,
    /// Tensor that produced `worst`.
    pub param: String,
    pub tensors: usize,
    pub elements: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst < GRADCHECK_TOLERANCE
    }
}

/// Replaces every tensor with fresh uniform values so that zero-initialized
/// biases and tokens do not hide gradient paths.
fn randomize(params: &mut ParamSet<f64>, rng: &mut impl Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        *t = uniform(rng, t.shape(), scale);
    }
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let y = g.mul(x, wv)?;
    g.sum(y, None)
}

fn check(module: &str, seed: u64, obj: &dyn Objective<f64>, params: &ParamSet<f64>) -> Result<GradReport> {
    let mut worst = (0.0, String::new());
    for name in params.names() {
        let mut best = f64::INFINITY;
        for eps in GRADCHECK_STEPS {
            best = best.min(finite_diff_check(obj, params, name, eps)?);
        }
        if best >= worst.0 {
            worst = (best, name.to_string());
        }
    }
    Ok(GradReport {
        module: module.to_string(),
        seed,
        worst: worst.0,
        param: worst.1,
        tensors: params.len(),
        elements: params.numel(),
    })
}

fn visiongraph_instance(seed: u64) -> Result<GradReport> {
    let mut r = nn::rng(seed);
    let (n, d, k, order) = (8, 4, 2, 3);
    let x: Tensor<f64> = uniform(&mut r, &[n, d], 1.0);
    let vn: Tensor<f64> = uniform(&mut r, &[1, d], 1.0);
    let graph = visiongraph::augment_virtual_node(&visiongraph::build_knn_graph(&x, k)?, &x, &vn, k)?;
    let mut params = ParamSet::new();
    ChebFilterBank::<f64>::init(&mut r, order, d)?.insert_into(&mut params, "cheb");
    params.insert("x", graph.features.clone());
    let w = uniform(&mut r, &[n + 1, d], 1.0);
    let lhat = graph.operator.clone();
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let l = g.constant(lhat.clone());
        let th = visiongraph::bound_thetas(b, "cheb", order)?;
        let e = visiongraph::record_cheb_conv(g, l, b.var("x")?, &th)?;
        weighted_sum(g, e, &w)
    };
    check("visiongraph", seed, &obj, &params)
}

fn odeflow_instance(seed: u64) -> Result<GradReport> {
    let mut r = nn::rng(seed);
    let (n, d) = (5, 4);
    let mut params = ParamSet::new();
    init_bidirectional(&mut params, &mut r, "ode", d, 2 * d, false);
    params.insert("tokens", Tensor::zeros([n, d]));
    randomize(&mut params, &mut r, 0.8);
    let w = uniform(&mut r, &[n, d], 1.0);
    let cfg = OdeConfig {
        steps: 4,
        mode: GradMode::Cached,
        ..OdeConfig::default()
    };
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let vars = BidirectionalVars::from_bound(b, "ode", false)?;
        let out = record_bidirectional(g, Arc::new(TransformerDynamics { heads: 2 }), b.var("tokens")?, &vars, &cfg)?;
        weighted_sum(g, out.h, &w)
    };
    check("odeflow", seed, &obj, &params)
}

fn hnf_instance(seed: u64) -> Result<GradReport> {
    let mut r = nn::rng(seed);
    let cfg = HnfConfig {
        image_size: 12,
        channels: 1,
        d: 4,
        layers: vec![ScaleSpec { patch_size: 4, k: 2 }, ScaleSpec { patch_size: 6, k: 1 }],
        ode_heads: 2,
        ff_width: 8,
        cheb_order: 3,
        ode_steps: 2,
        grad_mode: GradMode::Cached,
        tie_directions: false,
    };
    let mut params = hnf::init_hnf::<f64>(&cfg, &mut r)?;
    randomize(&mut params, &mut r, 0.8);
    let img = uniform(&mut r, &[12, 12, 1], 1.0);
    let w = uniform(&mut r, &[1, 4], 1.0);
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let layers = hnf::record_hnf(g, b, &cfg, &img)?;
        let fused = layers.last().expect("two layers").gate.fused;
        weighted_sum(g, fused, &w)
    };
    check("hnf", seed, &obj, &params)
}

fn textknow_instance(seed: u64) -> Result<GradReport> {
    let mut r = nn::rng(seed);
    let (d, vocab) = (4, 10);
    // A short chunk length exercises chunked encoding.
    let cfg = LmConfig {
        d,
        heads: 2,
        ff_width: 8,
        max_len: 4,
    };
    let mut params = SmallLm::<f64>::init(cfg, vocab, &mut r)?.params;
    textknow::init_text_heads(&mut params, d);
    params.insert("h_fus", Tensor::zeros([1, d]));
    randomize(&mut params, &mut r, 0.8);
    let lists = vec![
        Some(vec![vec![3, 4, 5, 6, 7], vec![8]]),
        Some(vec![vec![9, 2, 3]]),
        Some(vec![vec![4, 4]]),
    ];
    let w = uniform(&mut r, &[1, 3], 1.0);
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let bank = textknow::record_bank(g, b, &cfg, &lists)?;
        let (_, probs) = textknow::record_match_scores(g, b.var("h_fus")?, bank, b.var(MATCH_NAME)?)?;
        weighted_sum(g, probs, &w)
    };
    debug_assert!(params.contains(POOL_NAME));
    check("textknow", seed, &obj, &params)
}

fn fusionhead_instance(seed: u64) -> Result<GradReport> {
    let mut r = nn::rng(seed);
    let (d, classes) = (4, 3);
    let fcfg = FusionConfig { heads: 2, head_dim: 2 };
    let mut params = ParamSet::new();
    FusionParams::<f64>::init(&mut r, fcfg, d, classes)?.insert_into(&mut params, fusionhead::PREFIX);
    params.insert("h_text", uniform(&mut r, &[1, d], 1.0));
    params.insert("h_fus", uniform(&mut r, &[1, d], 1.0));
    let y = r.random_range(0..classes);
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let vars = FusionVars::from_bound(b, fusionhead::PREFIX)?;
        let cross = fusionhead::record_cross_modal_attention(g, b.var("h_text")?, b.var("h_fus")?, &vars, &fcfg)?;
        let probs = fusionhead::record_classify(g, cross.y, vars.classifier)?;
        nn::cross_entropy(g, probs, &[y])
    };
    check("fusionhead", seed, &obj, &params)
}

/// Finite-difference check of one module on a random tiny 64-bit instance.
pub fn gradcheck_module(name: &str, seed: u64) -> Result<GradReport> {
    match name {
        "visiongraph" => visiongraph_instance(seed),
        "odeflow" => odeflow_instance(seed),
        "hnf" => hnf_instance(seed),
        "textknow" => textknow_instance(seed),
        "fusionhead" => fusionhead_instance(seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown module `{other}`; expected one of {GRADCHECK_MODULES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes() {
        for m in GRADCHECK_MODULES {
            let r = gradcheck_module(m, 0).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.tensors > 0 && r.elements >= r.tensors);
        }
        assert!(gradcheck_module("patcher", 0).is_err());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::<f64>::from_f64([1, 2], &[0.3, -0.7]).unwrap());
        let op = Arc::new(Halved);
        let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
            let x = b.var("x")?;
            let v = g.value(x).map(|a| a * a);
            let y = g.custom(op.clone(), &[x], v)?;
            g.sum(y, None)
        };
        let r = check("toy", 0, &obj, &params).unwrap();
        assert!(!r.passed() && (r.worst - 0.5).abs() < 1e-6, "{r:?}");
    }

    /// `x²` with a deliberately halved derivative.
    struct Halved;

    impl crate::diffcore::CustomOp<f64> for Halved {
        fn name(&self) -> &str {
            "halved_square"
        }

        fn backward(&self, inputs: &[&Tensor<f64>], _out: &Tensor<f64>, cot: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![inputs[0].zip_map(cot, |x, c| x * c)?])
        }
    }
}
