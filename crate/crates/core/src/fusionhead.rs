//! Cross-modal multi-head attention over two single-vector modalities (the
//! matched text embedding and the fused image embedding) and the softmax
//! classifier on top.
//!
//! Every head attends over a 2-slot sequence `[text; fus]`. The query is the
//! sum of both modalities' queries, so neither modality is privileged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{argmax, xavier};

pub const PREFIX: &str = "fusion";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { heads: 4, head_dim: 16 }
    }
}

impl FusionConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Query/key/value projections of one modality, heads stacked along columns:
/// head `h` owns columns `h·d_h .. (h+1)·d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityProj<T: Element> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T: Element> {
    pub cfg: FusionConfig,
    pub text: ModalityProj<T>,
    pub fus: ModalityProj<T>,
    /// `(H·d_h)×d`.
    pub wo: Tensor<T>,
    /// `d×c`.
    pub classifier: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Fus,
}

impl Modality {
    fn key(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Fus => "fus",
        }
    }
}

fn name(prefix: &str, s: &str) -> String {
    format!("{prefix}.{s}")
}

impl<T: Element> ModalityProj<T> {
    fn init(rng: &mut impl Rng, d: usize, width: usize) -> Self {
        ModalityProj {
            wq: xavier(rng, d, width),
            wk: xavier(rng, d, width),
            wv: xavier(rng, d, width),
        }
    }
}

impl<T: Element> FusionParams<T> {
    pub fn init(rng: &mut impl Rng, cfg: FusionConfig, d: usize, classes: usize) -> Result<Self> {
        if cfg.heads == 0 || cfg.head_dim == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("invalid fusion shape {cfg:?}, d = {d}")));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("{classes} classes; need at least 2")));
        }
        let w = cfg.width();
        Ok(FusionParams {
            cfg,
            text: ModalityProj::init(rng, d, w),
            fus: ModalityProj::init(rng, d, w),
            wo: xavier(rng, w, d),
            classifier: xavier(rng, d, classes),
        })
    }

    pub fn dim(&self) -> usize {
        self.wo.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    fn proj(&self, m: Modality) -> &ModalityProj<T> {
        match m {
            Modality::Text => &self.text,
            Modality::Fus => &self.fus,
        }
    }

    /// Head `h`'s `d×d_h` query, key and value matrices for modality `m`.
    pub fn head(&self, m: Modality, h: usize) -> Result<[Tensor<T>; 3]> {
        if h >= self.cfg.heads {
            return Err(Error::InvalidArgument(format!("head {h} of {}", self.cfg.heads)));
        }
        let p = self.proj(m);
        let dh = self.cfg.head_dim;
        let cols = |w: &Tensor<T>| -> Result<Tensor<T>> {
            let (d, _) = w.dims2()?;
            let mut out = Tensor::zeros([d, dh]);
            for r in 0..d {
                for c in 0..dh {
                    out.set(r, c, w.at(r, h * dh + c));
                }
            }
            Ok(out)
        };
        Ok([cols(&p.wq)?, cols(&p.wk)?, cols(&p.wv)?])
    }

    /// Names: `{prefix}.{text|fus}.{wq|wk|wv}`, `{prefix}.wo`, `{prefix}.cls`.
    pub fn insert_into(&self, ps: &mut ParamSet<T>, prefix: &str) {
        for m in [Modality::Text, Modality::Fus] {
            let p = self.proj(m);
            ps.insert(name(prefix, &format!("{}.wq", m.key())), p.wq.clone());
            ps.insert(name(prefix, &format!("{}.wk", m.key())), p.wk.clone());
            ps.insert(name(prefix, &format!("{}.wv", m.key())), p.wv.clone());
        }
        ps.insert(name(prefix, "wo"), self.wo.clone());
        ps.insert(name(prefix, "cls"), self.classifier.clone());
    }

    pub fn from_params(ps: &ParamSet<T>, prefix: &str, cfg: FusionConfig) -> Result<Self> {
        let get = |s: &str| ps.get(&name(prefix, s)).cloned();
        let proj = |m: Modality| -> Result<ModalityProj<T>> {
            Ok(ModalityProj {
                wq: get(&format!("{}.wq", m.key()))?,
                wk: get(&format!("{}.wk", m.key()))?,
                wv: get(&format!("{}.wv", m.key()))?,
            })
        };
        let out = FusionParams {
            cfg,
            text: proj(Modality::Text)?,
            fus: proj(Modality::Fus)?,
            wo: get("wo")?,
            classifier: get("cls")?,
        };
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let (w, d) = self.wo.dims2()?;
        let bad = w != self.cfg.width()
            || self.classifier.dims2()?.0 != d
            || [&self.text, &self.fus]
                .iter()
                .flat_map(|p| [&p.wq, &p.wk, &p.wv])
                .any(|t| t.shape() != [d, w]);
        if bad {
            return Err(Error::ShapeMismatch(format!(
                "fusion tensors inconsistent with {:?} and d = {d}",
                self.cfg
            )));
        }
        Ok(())
    }
}

/// Graph handles of the head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    /// `[wq, wk, wv]` of the text modality.
    pub text: [Var; 3],
    pub fus: [Var; 3],
    pub wo: Var,
    pub classifier: Var,
}

impl FusionVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let trio = |m: &str| -> Result<[Var; 3]> {
            Ok([
                bound.var(&name(prefix, &format!("{m}.wq")))?,
                bound.var(&name(prefix, &format!("{m}.wk")))?,
                bound.var(&name(prefix, &format!("{m}.wv")))?,
            ])
        };
        Ok(FusionVars {
            text: trio("text")?,
            fus: trio("fus")?,
            wo: bound.var(&name(prefix, "wo"))?,
            classifier: bound.var(&name(prefix, "cls"))?,
        })
    }
}

/// Output handles of [`record_cross_modal_attention`].
#[derive(Clone, Debug)]
pub struct CrossVars {
    /// `1×d`.
    pub y: Var,
    /// Per head, `1×2` weights over `[text, fus]`.
    pub weights: Vec<Var>,
}

pub fn record_cross_modal_attention<T: Element>(
    g: &mut Graph<T>,
    h_text: Var,
    h_fus: Var,
    vars: &FusionVars,
    cfg: &FusionConfig,
) -> Result<CrossVars> {
    let d = g.shape(vars.wo)[1];
    let width = cfg.width();
    if g.shape(h_text) != [1, d] || g.shape(h_fus) != [1, d] {
        return Err(Error::ShapeMismatch(format!(
            "inputs {:?}, {:?} for width {d}",
            g.shape(h_text),
            g.shape(h_fus)
        )));
    }
    for &w in vars.text.iter().chain(&vars.fus) {
        if g.shape(w) != [d, width] {
            return Err(Error::ShapeMismatch(format!(
                "projection {:?}, expected [{d}, {width}]",
                g.shape(w)
            )));
        }
    }
    if g.shape(vars.wo) != [width, d] {
        return Err(Error::ShapeMismatch(format!("output projection {:?}", g.shape(vars.wo))));
    }
    let [tq, tk, tv] = vars.text;
    let [fq, fk, fv] = vars.fus;
    let q_t = g.matmul(h_text, tq)?;
    let q_f = g.matmul(h_fus, fq)?;
    let q = g.add(q_t, q_f)?;
    let k_t = g.matmul(h_text, tk)?;
    let k_f = g.matmul(h_fus, fk)?;
    let k = g.concat(&[k_t, k_f], 0)?;
    let v_t = g.matmul(h_text, tv)?;
    let v_f = g.matmul(h_fus, fv)?;
    let v = g.concat(&[v_t, v_f], 0)?;

    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, s, e)?;
        let kh = g.slice(k, 1, s, e)?;
        let vh = g.slice(v, 1, s, e)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let w = g.softmax(logits, 1)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    Ok(CrossVars {
        y: g.matmul(cat, vars.wo)?,
        weights,
    })
}

/// `p = softmax(y·W)`, `1×c`.
pub fn record_classify<T: Element>(g: &mut Graph<T>, y: Var, w: Var) -> Result<Var> {
    let (d, c) = g.value(w).dims2()?;
    if g.shape(y) != [1, d] || c < 2 {
        return Err(Error::ShapeMismatch(format!(
            "classifier {d}×{c} applied to {:?}",
            g.shape(y)
        )));
    }
    let logits = g.matmul(y, w)?;
    g.softmax(logits, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T: Element> {
    /// `1×d`.
    pub y: Tensor<T>,
    pub weights: Vec<[T; 2]>,
}

fn row<T: Element>(g: &mut Graph<T>, t: &Tensor<T>) -> Result<Var> {
    Ok(g.constant(t.reshape([1, t.len()])?))
}

fn bind_consts<T: Element>(g: &mut Graph<T>, p: &FusionParams<T>) -> FusionVars {
    let mut trio = |m: &ModalityProj<T>| {
        [
            g.constant(m.wq.clone()),
            g.constant(m.wk.clone()),
            g.constant(m.wv.clone()),
        ]
    };
    let text = trio(&p.text);
    let fus = trio(&p.fus);
    FusionVars {
        text,
        fus,
        wo: g.constant(p.wo.clone()),
        classifier: g.constant(p.classifier.clone()),
    }
}

pub fn cross_modal_attention<T: Element>(
    h_text: &Tensor<T>,
    h_fus: &Tensor<T>,
    params: &FusionParams<T>,
) -> Result<CrossAttention<T>> {
    params.check()?;
    let mut g = Graph::new();
    let a = row(&mut g, h_text)?;
    let b = row(&mut g, h_fus)?;
    let vars = bind_consts(&mut g, params);
    let out = record_cross_modal_attention(&mut g, a, b, &vars, &params.cfg)?;
    Ok(CrossAttention {
        y: g.value(out.y).clone(),
        weights: out
            .weights
            .iter()
            .map(|&w| {
                let d = g.value(w).data();
                [d[0], d[1]]
            })
            .collect(),
    })
}

/// Returns the class probabilities and the prediction (lowest index on ties).
pub fn classify<T: Element>(y: &Tensor<T>, w: &Tensor<T>) -> Result<(Vec<T>, usize)> {
    let mut g = Graph::new();
    let yv = row(&mut g, y)?;
    let wv = g.constant(w.clone());
    let p = record_classify(&mut g, yv, wv)?;
    let probs = g.value(p).data().to_vec();
    let pred = argmax(&probs);
    Ok((probs, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check_all;
    use crate::nn::{cross_entropy, rng, uniform};
    use proptest::prelude::*;

    fn setup(d: usize, cfg: FusionConfig, c: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, FusionParams<f64>) {
        let mut r = rng(seed);
        let p = FusionParams::init(&mut r, cfg, d, c).unwrap();
        (uniform(&mut r, &[1, d], 1.0), uniform(&mut r, &[1, d], 1.0), p)
    }

    #[test]
    fn default_head_shapes() {
        let (_, _, p) = setup(64, FusionConfig::default(), 10, 0);
        assert_eq!(p.cfg.heads, 4);
        for m in [Modality::Text, Modality::Fus] {
            for h in 0..4 {
                for t in p.head(m, h).unwrap() {
                    assert_eq!(t.shape(), [64, 16]);
                }
            }
        }
        assert_eq!(p.wo.shape(), [64, 64]);
        assert_eq!(p.classifier.shape(), [64, 10]);
        assert!(p.head(Modality::Text, 4).is_err());
    }

    #[test]
    fn symmetric_keys_give_even_weights() {
        let (x, _, mut p) = setup(8, FusionConfig { heads: 2, head_dim: 4 }, 3, 1);
        p.fus.wk = p.text.wk.clone();
        let out = cross_modal_attention(&x, &x, &p).unwrap();
        for w in out.weights {
            assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let (a, b, mut p) = setup(8, FusionConfig { heads: 2, head_dim: 4 }, 3, 2);
        p.text.wv = Tensor::zeros([8, 8]);
        p.fus.wv = Tensor::zeros([8, 8]);
        let out = cross_modal_attention(&a, &b, &p).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    /// Step-by-step evaluation with plain loops.
    fn hand_eval(a: &[f64], b: &[f64], p: &FusionParams<f64>) -> Vec<f64> {
        let (heads, dh) = (p.cfg.heads, p.cfg.head_dim);
        let d = a.len();
        let proj = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..w.shape()[1]).map(|c| (0..d).map(|r| x[r] * w.at(r, c)).sum()).collect()
        };
        let (qt, qf) = (proj(a, &p.text.wq), proj(b, &p.fus.wq));
        let (kt, kf) = (proj(a, &p.text.wk), proj(b, &p.fus.wk));
        let (vt, vf) = (proj(a, &p.text.wv), proj(b, &p.fus.wv));
        let mut cat = Vec::new();
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let q: Vec<f64> = r.clone().map(|i| qt[i] + qf[i]).collect();
            let dot = |k: &[f64]| r.clone().zip(&q).map(|(i, qi)| qi * k[i]).sum::<f64>() / (dh as f64).sqrt();
            let (l0, l1) = (dot(&kt), dot(&kf));
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            cat.extend(r.map(|i| w0 * vt[i] + w1 * vf[i]));
        }
        proj(&cat, &p.wo)
    }

    #[test]
    fn matches_hand_evaluation() {
        for seed in 0..5 {
            let (a, b, p) = setup(8, FusionConfig { heads: 2, head_dim: 4 }, 3, 10 + seed);
            let out = cross_modal_attention(&a, &b, &p).unwrap();
            let want = hand_eval(a.data(), b.data(), &p);
            for (x, y) in out.y.data().iter().zip(&want) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let y = Tensor::<f64>::from_f64([1, 3], &[1.0, -2.0, 0.5]).unwrap();
        let (p, pred) = classify(&y, &Tensor::zeros([3, 4])).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(pred, 0);
        assert!(classify(&y, &Tensor::zeros([3, 1])).is_err());
        assert!(classify(&y, &Tensor::zeros([2, 4])).is_err());
    }

    #[test]
    fn shape_errors() {
        let (a, _, p) = setup(8, FusionConfig { heads: 2, head_dim: 4 }, 3, 3);
        let short = Tensor::<f64>::zeros([1, 5]);
        assert!(matches!(cross_modal_attention(&a, &short, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn param_set_round_trip() {
        let (_, _, p) = setup(8, FusionConfig { heads: 2, head_dim: 3 }, 4, 4);
        let mut ps = ParamSet::new();
        p.insert_into(&mut ps, PREFIX);
        assert_eq!(ps.len(), 8);
        assert_eq!(FusionParams::from_params(&ps, PREFIX, p.cfg).unwrap(), p);
        assert!(FusionParams::from_params(&ps, PREFIX, FusionConfig { heads: 3, head_dim: 3 }).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = FusionConfig { heads: 2, head_dim: 4 };
        let (a, b, p) = setup(8, cfg, 3, 5);
        let mut ps = ParamSet::new();
        p.insert_into(&mut ps, PREFIX);
        let obj = move |g: &mut Graph<f64>, bound: &BoundParams| {
            let vars = FusionVars::from_bound(bound, PREFIX)?;
            let x = g.constant(a.clone());
            let z = g.constant(b.clone());
            let out = record_cross_modal_attention(g, x, z, &vars, &cfg)?;
            let probs = record_classify(g, out.y, vars.classifier)?;
            cross_entropy(g, probs, &[2])
        };
        let (worst, name) = finite_diff_check_all(&obj, &ps, 1e-5).unwrap();
        assert!(worst < 1e-4, "{name}: {worst}");
    }

    proptest! {
        #[test]
        fn weights_and_probabilities_normalize(seed in 0u64..500, heads in 1usize..4, dh in 1usize..5) {
            let (a, b, p) = setup(6, FusionConfig { heads, head_dim: dh }, 4, seed);
            let out = cross_modal_attention(&a, &b, &p).unwrap();
            for w in &out.weights {
                prop_assert!(w[0] >= 0.0 && w[1] >= 0.0);
                prop_assert!((w[0] + w[1] - 1.0).abs() < 1e-10);
            }
            let (probs, pred) = classify(&out.y, &p.classifier).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            // A constant added to every logit leaves the prediction alone.
            let mut w2 = p.classifier.clone();
            let (d, c) = w2.dims2().unwrap();
            let ysum: f64 = out.y.data().iter().sum();
            if ysum.abs() > 1e-3 {
                for r in 0..d {
                    for k in 0..c {
                        w2.set(r, k, w2.at(r, k) + 0.7 / ysum);
                    }
                }
                prop_assert_eq!(classify(&out.y, &w2).unwrap().1, pred);
            }
        }

        #[test]
        fn relabeling_symmetry(seed in 0u64..500) {
            let (a, b, p) = setup(8, FusionConfig { heads: 2, head_dim: 4 }, 3, seed);
            let mut swapped = p.clone();
            std::mem::swap(&mut swapped.text, &mut swapped.fus);
            let y1 = cross_modal_attention(&a, &b, &p).unwrap().y;
            let y2 = cross_modal_attention(&b, &a, &swapped).unwrap().y;
            for (x, y) in y1.data().iter().zip(y2.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
