//! Hierarchical network fusion: per layer, a bidirectional ODE over the
//! patch sequence and a Chebyshev convolution over the patch graph, merged by
//! a two-expert gate whose output conditions the next layer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::xavier;
use crate::odeflow::{
    init_bidirectional, record_bidirectional, BidirectionalVars, GradMode, OdeConfig,
    TransformerDynamics, DEFAULT_STEPS,
};
use crate::patcher::{record_embedding, tokenize_patches, PatchEmbedParams, PatchEmbedVars};
use crate::visiongraph::{
    augment_virtual_node, bound_thetas, build_knn_graph, record_cheb_conv, ChebFilterBank,
    DEFAULT_CHEB_ORDER,
};

/// Patch size and neighbor count of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub patch_size: usize,
    pub k: usize,
}

/// Shape of the fusion network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnfConfig {
    pub image_size: usize,
    pub channels: usize,
    pub d: usize,
    pub layers: Vec<ScaleSpec>,
    pub ode_heads: usize,
    pub ff_width: usize,
    pub cheb_order: usize,
    pub ode_steps: usize,
    pub grad_mode: GradMode,
    pub tie_directions: bool,
}

impl Default for HnfConfig {
    fn default() -> Self {
        HnfConfig {
            image_size: 224,
            channels: 1,
            d: 64,
            layers: vec![
                ScaleSpec { patch_size: 16, k: 10 },
                ScaleSpec { patch_size: 28, k: 6 },
                ScaleSpec { patch_size: 32, k: 4 },
            ],
            ode_heads: 4,
            ff_width: 128,
            cheb_order: DEFAULT_CHEB_ORDER,
            ode_steps: DEFAULT_STEPS,
            grad_mode: GradMode::Irdm,
            tie_directions: false,
        }
    }
}

impl HnfConfig {
    pub fn ode(&self) -> OdeConfig {
        OdeConfig {
            steps: self.ode_steps,
            mode: self.grad_mode,
            ..OdeConfig::default()
        }
    }

    /// Checks divisibility, neighbor counts and head split.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("at least one layer is required".into()));
        }
        if self.ode_heads == 0 || self.d % self.ode_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} heads do not divide d = {}",
                self.ode_heads, self.d
            )));
        }
        if self.cheb_order == 0 || self.ode_steps == 0 {
            return Err(Error::InvalidArgument("cheb_order and ode_steps must be positive".into()));
        }
        for s in &self.layers {
            let n = crate::patcher::patch_count(self.image_size, s.patch_size)?;
            if s.k == 0 || s.k >= n {
                return Err(Error::KTooLarge { k: s.k, n });
            }
        }
        Ok(())
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("hnf.l{i}")
}

/// Initializes every layer's parameters under `hnf.l{i}.*`.
pub fn init_hnf<T: Element>(cfg: &HnfConfig, rng: &mut impl Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let d = cfg.d;
    for (i, s) in cfg.layers.iter().enumerate() {
        let p = layer_prefix(i);
        PatchEmbedParams::init(rng, s.patch_size, cfg.channels, cfg.image_size, d)?
            .insert_into(&mut ps, &format!("{p}.embed"));
        init_bidirectional(&mut ps, rng, &format!("{p}.ode"), d, cfg.ff_width, cfg.tie_directions);
        ChebFilterBank::init(rng, cfg.cheb_order, d)?.insert_into(&mut ps, &format!("{p}.cheb"));
        ps.insert(format!("{p}.vn"), Tensor::zeros([1, d]));
        ps.insert(format!("{p}.moe.wg"), xavier(rng, 2 * d, 2));
        if i > 0 {
            ps.insert(format!("{p}.inject"), xavier(rng, d, d));
        }
    }
    Ok(ps)
}

/// Graph outputs of two-expert gating.
#[derive(Clone, Copy, Debug)]
pub struct GateOut {
    /// `1×2`, non-negative, sums to one.
    pub weights: Var,
    /// `1×d`.
    pub fused: Var,
}

/// `w = softmax([h_cls, h_vn]·W_g)`, `fused = w₀·h_cls + w₁·h_vn`.
pub fn record_moe_gate<T: Element>(g: &mut Graph<T>, h_cls: Var, h_vn: Var, wg: Var) -> Result<GateOut> {
    let d = g.value(h_cls).len();
    if g.shape(h_cls) != [1, d] || g.shape(h_vn) != [1, d] || g.shape(wg) != [2 * d, 2] {
        return Err(Error::ShapeMismatch(format!(
            "gate inputs {:?}, {:?} with weights {:?}",
            g.shape(h_cls),
            g.shape(h_vn),
            g.shape(wg)
        )));
    }
    let cat = g.concat(&[h_cls, h_vn], 1)?;
    let logits = g.matmul(cat, wg)?;
    let weights = g.softmax(logits, 1)?;
    let stack = g.concat(&[h_cls, h_vn], 0)?;
    let fused = g.matmul(weights, stack)?;
    Ok(GateOut { weights, fused })
}

/// Value form of [`record_moe_gate`]; returns `(weights, fused)`.
pub fn moe_gate<T: Element>(h_cls: &Tensor<T>, h_vn: &Tensor<T>, wg: &Tensor<T>) -> Result<([T; 2], Tensor<T>)> {
    let mut g = Graph::new();
    let d = h_cls.len();
    let a = g.constant(h_cls.reshape([1, d])?);
    let b = g.constant(h_vn.reshape([1, h_vn.len()])?);
    let w = g.constant(wg.clone());
    let out = record_moe_gate(&mut g, a, b, w)?;
    let wv = g.value(out.weights).data();
    Ok(([wv[0], wv[1]], g.value(out.fused).clone()))
}

/// Handles produced by one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub h_cls: Var,
    pub h_vn: Var,
    pub gate: GateOut,
    /// Node count of the augmented patch graph.
    pub graph_nodes: usize,
}

/// Records layer `i` on `img` (`H×W×c`). `prev` is the previous layer's
/// fused `1×d` row; when present, `prev·W_in` is added to the cls token and
/// to the virtual-node feature.
pub fn record_hnf_layer<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &HnfConfig,
    i: usize,
    img: &Tensor<T>,
    prev: Option<Var>,
) -> Result<LayerVars> {
    let spec = cfg
        .layers
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {i} not configured")))?;
    let p = layer_prefix(i);
    let patches = tokenize_patches(img, spec.patch_size)?;
    let n = patches.dims2()?.0;
    let x = g.constant(patches);
    let inject = match prev {
        Some(prev) => Some(g.matmul(prev, bound.var(&format!("{p}.inject"))?)?),
        None => None,
    };
    let embed = PatchEmbedVars::from_bound(bound, &format!("{p}.embed"))?;
    let (embedded, tokens) = record_embedding(g, x, &embed, inject)?;

    let vars = BidirectionalVars::from_bound(bound, &format!("{p}.ode"), cfg.tie_directions)?;
    let dynamics = Arc::new(TransformerDynamics { heads: cfg.ode_heads });
    let seq = record_bidirectional(g, dynamics, tokens, &vars, &cfg.ode())?;
    let h_cls = g.slice(seq.h, 0, 0, 1)?;

    let adjacency = build_knn_graph(g.value(embedded), spec.k)?;
    let vn = bound.var(&format!("{p}.vn"))?;
    let vn_feat = match inject {
        Some(v) => g.add(vn, v)?,
        None => vn,
    };
    let graph = augment_virtual_node(&adjacency, g.value(embedded), g.value(vn_feat), spec.k)?;
    let lhat = g.constant(graph.operator);
    let feats = g.concat(&[embedded, vn_feat], 0)?;
    let thetas = bound_thetas(bound, &format!("{p}.cheb"), cfg.cheb_order)?;
    let e = record_cheb_conv(g, lhat, feats, &thetas)?;
    let h_vn = g.slice(e, 0, n, n + 1)?;

    let gate = record_moe_gate(g, h_cls, h_vn, bound.var(&format!("{p}.moe.wg"))?)?;
    Ok(LayerVars {
        h_cls,
        h_vn,
        gate,
        graph_nodes: n + 1,
    })
}

/// Chains every configured layer; the last layer's fused row is `h_fus`.
pub fn record_hnf<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &HnfConfig,
    img: &Tensor<T>,
) -> Result<Vec<LayerVars>> {
    let mut out: Vec<LayerVars> = Vec::with_capacity(cfg.layers.len());
    for i in 0..cfg.layers.len() {
        let prev = out.last().map(|l| l.gate.fused);
        out.push(record_hnf_layer(g, bound, cfg, i, img, prev)?);
    }
    Ok(out)
}

/// Final fused embedding and the gate weights of every layer so far.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding<T: Element> {
    /// `1×d`.
    pub h_fus: Tensor<T>,
    pub gate_history: Vec<[T; 2]>,
}

/// Value output of one layer.
#[derive(Clone, Debug)]
pub struct LayerOutput<T: Element> {
    pub h_cls: Tensor<T>,
    pub h_vn: Tensor<T>,
    pub fused: FusedEmbedding<T>,
    pub graph_nodes: usize,
}

fn gate_pair<T: Element>(g: &Graph<T>, v: Var) -> [T; 2] {
    let w = g.value(v).data();
    [w[0], w[1]]
}

/// Value form of [`record_hnf_layer`].
pub fn hnf_layer_forward<T: Element>(
    img: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &HnfConfig,
    i: usize,
    prev: Option<&Tensor<T>>,
) -> Result<LayerOutput<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let prev = prev.map(|p| g.constant(p.clone()));
    let l = record_hnf_layer(&mut g, &bound, cfg, i, img, prev)?;
    Ok(LayerOutput {
        h_cls: g.value(l.h_cls).clone(),
        h_vn: g.value(l.h_vn).clone(),
        fused: FusedEmbedding {
            h_fus: g.value(l.gate.fused).clone(),
            gate_history: vec![gate_pair(&g, l.gate.weights)],
        },
        graph_nodes: l.graph_nodes,
    })
}

/// Value form of [`record_hnf`].
pub fn hnf_forward<T: Element>(img: &Tensor<T>, params: &ParamSet<T>, cfg: &HnfConfig) -> Result<FusedEmbedding<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let layers = record_hnf(&mut g, &bound, cfg, img)?;
    let last = layers.last().expect("validated non-empty");
    Ok(FusedEmbedding {
        h_fus: g.value(last.gate.fused).clone(),
        gate_history: layers.iter().map(|l| gate_pair(&g, l.gate.weights)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::nn::{rng, uniform};

    fn tiny(layers: &[(usize, usize)]) -> HnfConfig {
        HnfConfig {
            image_size: 12,
            channels: 1,
            d: 4,
            layers: layers
                .iter()
                .map(|&(patch_size, k)| ScaleSpec { patch_size, k })
                .collect(),
            ode_heads: 2,
            ff_width: 8,
            cheb_order: 3,
            ode_steps: 2,
            grad_mode: GradMode::Cached,
            tie_directions: false,
        }
    }

    fn image(seed: u64, cfg: &HnfConfig) -> Tensor<f64> {
        let mut r = rng(seed);
        uniform(&mut r, &[cfg.image_size, cfg.image_size, cfg.channels], 1.0)
    }

    #[test]
    fn gate_small_cases() {
        let a = Tensor::<f64>::from_f64([1, 2], &[1.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_f64([1, 2], &[-1.0, 5.0]).unwrap();
        let (w, f) = moe_gate(&a, &b, &Tensor::zeros([4, 2])).unwrap();
        assert_eq!(w, [0.5, 0.5]);
        assert_eq!(f.data(), &[0.0, 4.0]);

        let mut r = rng(1);
        let wg: Tensor<f64> = uniform(&mut r, &[4, 2], 2.0);
        let (_, f) = moe_gate(&a, &a, &wg).unwrap();
        assert!(f.zip_map(&a, |x, y| x - y).unwrap().max_abs() < 1e-15);

        // Logits (1, −1): h_cls = (1, 0), h_vn = 0, W_g rows pick the logits.
        let c = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
        let wg = Tensor::<f64>::from_f64([4, 2], &[1.0, -1.0, 0., 0., 0., 0., 0., 0.]).unwrap();
        let (w, _) = moe_gate(&c, &Tensor::zeros([1, 2]), &wg).unwrap();
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((w[0] - s2).abs() < 1e-15 && (w[1] - (1.0 - s2)).abs() < 1e-15);
        assert!((w[0] - 0.8808).abs() < 1e-4);

        assert!(matches!(
            moe_gate(&a, &b, &Tensor::zeros([3, 2])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_injection_equals_no_injection() {
        let cfg = tiny(&[(4, 2), (6, 1)]);
        let mut ps = init_hnf::<f64>(&cfg, &mut rng(2)).unwrap();
        *ps.get_mut("hnf.l1.inject").unwrap() = Tensor::zeros([4, 4]);
        let img = image(3, &cfg);
        let a = hnf_layer_forward(&img, &ps, &cfg, 1, None).unwrap();
        let b = hnf_layer_forward(&img, &ps, &cfg, 1, Some(&Tensor::zeros([1, 4]))).unwrap();
        assert_eq!(a.fused, b.fused);
        let mut r = rng(4);
        let c = hnf_layer_forward(&img, &ps, &cfg, 1, Some(&uniform(&mut r, &[1, 4], 1.0))).unwrap();
        assert_eq!(a.fused, c.fused);
    }

    #[test]
    fn forward_is_deterministic_and_records_gates() {
        let cfg = tiny(&[(4, 2), (6, 1), (3, 3)]);
        let ps = init_hnf::<f64>(&cfg, &mut rng(5)).unwrap();
        let img = image(6, &cfg);
        let a = hnf_forward(&img, &ps, &cfg).unwrap();
        let b = hnf_forward(&img.clone(), &ps, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gate_history.len(), 3);
        for w in &a.gate_history {
            assert!(w[0] >= 0.0 && w[1] >= 0.0 && (w[0] + w[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_layer_chain_equals_layer() {
        let cfg = tiny(&[(4, 2)]);
        let ps = init_hnf::<f64>(&cfg, &mut rng(7)).unwrap();
        let img = image(8, &cfg);
        assert_eq!(
            hnf_forward(&img, &ps, &cfg).unwrap(),
            hnf_layer_forward(&img, &ps, &cfg, 0, None).unwrap().fused
        );
    }

    #[test]
    fn layer_order_matters() {
        let cfg = tiny(&[(4, 2), (6, 1)]);
        let ps = init_hnf::<f64>(&cfg, &mut rng(9)).unwrap();
        let img = image(10, &cfg);
        let forward = hnf_forward(&img, &ps, &cfg).unwrap();
        // Swap the two layers' parameters and scale specs.
        let swapped_cfg = tiny(&[(6, 1), (4, 2)]);
        let mut swapped = ParamSet::new();
        for (name, t) in ps.iter() {
            let renamed = if let Some(rest) = name.strip_prefix("hnf.l0.") {
                format!("hnf.l1.{rest}")
            } else if let Some(rest) = name.strip_prefix("hnf.l1.") {
                format!("hnf.l0.{rest}")
            } else {
                name.to_string()
            };
            swapped.insert(renamed, t.clone());
        }
        let inject = swapped.remove("hnf.l0.inject").unwrap();
        swapped.insert("hnf.l1.inject", inject);
        let other = hnf_forward(&img, &swapped, &swapped_cfg).unwrap();
        assert!(forward.h_fus.zip_map(&other.h_fus, |a, b| a - b).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn default_first_layer_graph_has_197_nodes() {
        let cfg = HnfConfig {
            d: 8,
            ode_heads: 4,
            ff_width: 8,
            ode_steps: 1,
            ..HnfConfig::default()
        };
        let ps = init_hnf::<f32>(&cfg, &mut rng(11)).unwrap();
        let img = Tensor::<f32>::zeros([224, 224, 1]).map(|_| 0.1);
        let mut r = rng(12);
        let img = img.zip_map(&uniform(&mut r, &[224, 224, 1], 0.5), |a, b| a + b).unwrap();
        let out = hnf_layer_forward(&img, &ps, &cfg, 0, None).unwrap();
        assert_eq!(out.graph_nodes, 197);
        assert_eq!(out.fused.h_fus.shape(), &[1, 8]);
    }

    #[test]
    fn config_validation() {
        assert!(HnfConfig::default().validate().is_ok());
        let mut bad = tiny(&[(5, 1)]);
        assert!(matches!(bad.validate(), Err(Error::IndivisiblePatchSize { .. })));
        bad = tiny(&[(6, 4)]);
        assert!(matches!(bad.validate(), Err(Error::KTooLarge { k: 4, n: 4 })));
        bad = tiny(&[(4, 2)]);
        bad.ode_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forcing_the_cls_expert_isolates_the_graph_path() {
        let cfg = tiny(&[(4, 2), (6, 1)]);
        let mut ps = init_hnf::<f64>(&cfg, &mut rng(13)).unwrap();
        // h_cls entries are σ outputs, so positive; these weights make the
        // cls logit exceed the other by 100·Σh_cls.
        for i in 0..2 {
            let mut wg = Tensor::zeros([8, 2]);
            for r in 0..4 {
                wg.set(r, 0, 50.0);
                wg.set(r, 1, -50.0);
            }
            *ps.get_mut(&format!("hnf.l{i}.moe.wg")).unwrap() = wg;
        }
        let img = image(14, &cfg);
        let base = hnf_forward(&img, &ps, &cfg).unwrap();
        assert!(base.gate_history.iter().all(|w| w[0] == 1.0));
        let mut r = rng(15);
        for i in 0..2 {
            for k in 0..3 {
                let t = ps.get_mut(&format!("hnf.l{i}.cheb.theta{k}")).unwrap();
                let noise: Tensor<f64> = uniform(&mut r, t.shape(), 1.0);
                t.add_assign(&noise).unwrap();
            }
        }
        let perturbed = hnf_forward(&img, &ps, &cfg).unwrap();
        assert!(base.h_fus.zip_map(&perturbed.h_fus, |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny(&[(4, 2), (6, 1)]);
        let mut ps = init_hnf::<f64>(&cfg, &mut rng(16)).unwrap();
        // A zero cls row sits where layer normalization is sharply curved,
        // which central differences cannot resolve.
        for (i, name) in ["hnf.l0.embed.cls", "hnf.l1.embed.cls"].into_iter().enumerate() {
            ps.insert(name, uniform(&mut rng(40 + i as u64), &[1, 4], 1.0));
        }
        let img = image(17, &cfg);
        let w: Tensor<f64> = uniform(&mut rng(18), &[1, 4], 1.0);
        let c2 = cfg.clone();
        let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
            let layers = record_hnf(g, b, &c2, &img)?;
            let wv = g.constant(w.clone());
            let y = g.mul(layers.last().unwrap().gate.fused, wv)?;
            g.sum(y, None)
        };
        for name in [
            "hnf.l0.embed.w",
            "hnf.l0.ode.fwd.attn.wq",
            "hnf.l0.cheb.theta1",
            "hnf.l0.moe.wg",
            "hnf.l1.inject",
            "hnf.l1.ode.bwd.ff.w1",
            "hnf.l1.ode.gate.f2",
            "hnf.l1.vn",
            "hnf.l1.embed.pos",
            "hnf.l0.embed.cls",
            "hnf.l1.embed.cls",
        ] {
            // Small enough to stay clear of feed-forward ReLU kinks, large
            // enough that roundoff on entries near 1e-7 stays below 1e-4.
            let err = finite_diff_check(&obj, &ps, name, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
