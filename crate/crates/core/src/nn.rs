//! Layer building blocks composed from the tape primitives, plus parameter
//! initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Seeded RNG used everywhere randomness is needed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform(−a, a) tensor.
pub fn uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], a: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Glorot/Xavier uniform: `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<T: Element>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], a)
}

/// `n×1` column of ones times a `1×d` row: repeats the row `n` times.
pub fn repeat_rows<T: Element>(g: &mut Graph<T>, row: Var, n: usize) -> Result<Var> {
    let ones = g.constant(Tensor::ones([n, 1]));
    g.matmul(ones, row)
}

/// `x · w + 1·b` for `x: n×i`, `w: i×o`, `b: 1×o`.
pub fn linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => {
            let n = g.shape(x)[0];
            let bb = repeat_rows(g, b, n)?;
            g.add(y, bb)
        }
        None => Ok(y),
    }
}

/// Layer normalization over rows with a learned `1×d` gain and offset.
pub fn layer_norm_affine<T: Element>(g: &mut Graph<T>, x: Var, gain: Var, offset: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let y = g.layer_norm(x, LAYER_NORM_EPS)?;
    let gg = repeat_rows(g, gain, n)?;
    let bb = repeat_rows(g, offset, n)?;
    let y = g.mul(y, gg)?;
    g.add(y, bb)
}

/// Weights of one transformer encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

/// Names of the tensors in an encoder block, relative to its prefix.
pub const ENCODER_TENSORS: [&str; 12] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "ff.w1",
    "ff.b1", "ff.w2", "ff.b2",
];

/// Initializes an encoder block under `prefix` with feed-forward width `ff`.
pub fn init_encoder<T: Element>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    ff: usize,
) {
    let p = |s: &str| format!("{prefix}.{s}");
    for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        params.insert(p(w), xavier(rng, d, d));
    }
    params.insert(p("ln1.g"), Tensor::ones([1, d]));
    params.insert(p("ln1.b"), Tensor::zeros([1, d]));
    params.insert(p("ln2.g"), Tensor::ones([1, d]));
    params.insert(p("ln2.b"), Tensor::zeros([1, d]));
    params.insert(p("ff.w1"), xavier(rng, d, ff));
    params.insert(p("ff.b1"), Tensor::zeros([1, ff]));
    params.insert(p("ff.w2"), xavier(rng, ff, d));
    params.insert(p("ff.b2"), Tensor::zeros([1, d]));
}

impl EncoderVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Self::from_slice(
            &ENCODER_TENSORS
                .iter()
                .map(|s| bound.var(&format!("{prefix}.{s}")))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Builds from handles ordered like [`ENCODER_TENSORS`].
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != ENCODER_TENSORS.len() {
            return Err(Error::ShapeMismatch(format!(
                "encoder block needs {} tensors, got {}",
                ENCODER_TENSORS.len(),
                v.len()
            )));
        }
        Ok(EncoderVars {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            ln1_g: v[4],
            ln1_b: v[5],
            ln2_g: v[6],
            ln2_b: v[7],
            ff_w1: v[8],
            ff_b1: v[9],
            ff_w2: v[10],
            ff_b2: v[11],
        })
    }
}

/// Full (non-causal) multi-head self-attention over the rows of `x`,
/// including the output projection.
pub fn self_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(wq)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dh = d / heads;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { q } else { g.slice(q, 1, s, e)? };
        let kh = if heads == 1 { k } else { g.slice(k, 1, s, e)? };
        let vh = if heads == 1 { v } else { g.slice(v, 1, s, e)? };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    g.matmul(cat, wo)
}

/// Position-wise feed-forward: `relu(x·W1 + b1)·W2 + b2`.
pub fn feed_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &EncoderVars) -> Result<Var> {
    let h = linear(g, x, p.ff_w1, Some(p.ff_b1))?;
    let h = g.relu(h)?;
    linear(g, h, p.ff_w2, Some(p.ff_b2))
}

/// Standard pre-norm encoder block with residual connections.
pub fn encoder_block<T: Element>(g: &mut Graph<T>, x: Var, p: &EncoderVars, heads: usize) -> Result<Var> {
    let u = layer_norm_affine(g, x, p.ln1_g, p.ln1_b)?;
    let a = self_attention(g, u, p.wq, p.wk, p.wv, p.wo, heads)?;
    let x = g.add(x, a)?;
    let v = layer_norm_affine(g, x, p.ln2_g, p.ln2_b)?;
    let f = feed_forward(g, v, p)?;
    g.add(x, f)
}

/// Mean cross-entropy `−mean_i log p_i[y_i]` of row-wise softmax probabilities
/// `probs: n×c` against integer targets.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, probs: Var, targets: &[usize]) -> Result<Var> {
    let (n, c) = g.value(probs).dims2()?;
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {n} rows",
            targets.len()
        )));
    }
    let mut onehot = Tensor::zeros([n, c]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidArgument(format!("target {t} ≥ {c} classes")));
        }
        onehot.set(i, t, T::one());
    }
    let onehot = g.constant(onehot);
    let logp = g.log(probs)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked, None)?;
    g.scale(total, -1.0 / n as f64)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Element>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Constant `n×n` matrix reversing rows `1..n` while keeping row 0 in place.
pub fn reversal_keep_first<T: Element>(n: usize) -> Tensor<T> {
    let mut p = Tensor::zeros([n, n]);
    if n > 0 {
        p.set(0, 0, T::one());
    }
    for i in 1..n {
        p.set(i, n - i, T::one());
    }
    p
}

/// Adam with bias correction. State is created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter that has an entry in `grads`; others are
    /// left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            p.check_same_shape(g)?;
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros_like(g));
                self.v.insert(name, Tensor::zeros_like(g));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (i, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = T::c(mi);
                v[i] = T::c(vi);
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x = T::c(x.f64() - upd);
            }
        }
        Ok(())
    }
}
