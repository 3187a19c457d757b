//! Micrograph normalization, patch tokenization and patch embedding.

use rand::Rng;

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{repeat_rows, xavier};

/// A decoded raster with values in `[0, 1]`, stored `h×w×c` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Micrograph {
    pub pixels: Tensor<f32>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl Micrograph {
    pub fn new(pixels: Tensor<f32>, label: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        let m = Micrograph {
            pixels,
            label,
            source_id: source_id.into(),
        };
        m.dims()?;
        Ok(m)
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        match *self.pixels.shape() {
            [h, w, c] => {
                if h == 0 || w == 0 {
                    return Err(Error::EmptyImage);
                }
                if c != 1 && c != 3 {
                    return Err(Error::UnsupportedChannelCount(c));
                }
                Ok((h, w, c))
            }
            _ if self.pixels.is_empty() => Err(Error::EmptyImage),
            ref s => Err(Error::ShapeMismatch(format!("expected h×w×c, got {s:?}"))),
        }
    }
}

/// Bilinear resize to `target×target` (half-pixel centers), then maps
/// `[0, 1]` to `[−1, 1]` per channel via `(x − 0.5) / 0.5`.
pub fn preprocess_image<T: Element>(raw: &Micrograph, target: usize) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let (h, w, c) = raw.dims()?;
    let px = raw.pixels.data();
    let sample = |y: usize, x: usize, ch: usize| px[(y * w + x) * c + ch] as f64;
    let coord = |dst: usize, src_len: usize| {
        let s = (dst as f64 + 0.5) * src_len as f64 / target as f64 - 0.5;
        let s = s.clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(target * target * c);
    for ty in 0..target {
        let (y0, y1, fy) = coord(ty, h);
        for tx in 0..target {
            let (x0, x1, fx) = coord(tx, w);
            for ch in 0..c {
                let (a, b) = (sample(y0, x0, ch), sample(y0, x1, ch));
                let (p, q) = (sample(y1, x0, ch), sample(y1, x1, ch));
                let top = a + fx * (b - a);
                let bottom = p + fx * (q - p);
                let v = top + fy * (bottom - top);
                out.push(T::c((v.clamp(0.0, 1.0) - 0.5) / 0.5));
            }
        }
    }
    Tensor::new([target, target, c], out)
}

/// Splits an `H×W×c` image into non-overlapping `p×p` patches.
///
/// Row `i` of the result is patch `i` in row-major patch-grid order; within a
/// patch, values are laid out `(y, x, channel)` row-major.
pub fn tokenize_patches<T: Element>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(img)?;
    check_divides(p, h)?;
    check_divides(p, w)?;
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(img.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = (py * p + y) * w + px * p;
                out.extend_from_slice(&img.data()[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new([gh * gw, p * p * c], out)
}

/// Inverse of [`tokenize_patches`].
pub fn reassemble_patches<T: Element>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<Tensor<T>> {
    check_divides(p, height)?;
    check_divides(p, width)?;
    let (n, cols) = patches.dims2()?;
    let gw = width / p;
    if n != (height / p) * gw || cols != p * p * channels {
        return Err(Error::ShapeMismatch(format!(
            "{n}×{cols} patches for a {height}×{width}×{channels} image at p={p}"
        )));
    }
    let mut img = vec![T::zero(); height * width * channels];
    for i in 0..n {
        let (py, px) = (i / gw, i % gw);
        let src = patches.row_slice(i);
        for y in 0..p {
            let row = (py * p + y) * width + px * p;
            img[row * channels..(row + p) * channels]
                .copy_from_slice(&src[y * p * channels..(y + 1) * p * channels]);
        }
    }
    Tensor::new([height, width, channels], img)
}

fn image_dims<T: Element>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        [_, _, _] => Err(Error::EmptyImage),
        ref s => Err(Error::ShapeMismatch(format!("expected h×w×c, got {s:?}"))),
    }
}

fn check_divides(p: usize, extent: usize) -> Result<()> {
    if p == 0 || extent % p != 0 {
        return Err(Error::IndivisiblePatchSize { patch: p, extent });
    }
    Ok(())
}

/// Number of patches of size `p` in a square `image_size` image.
pub fn patch_count(image_size: usize, p: usize) -> Result<usize> {
    check_divides(p, image_size)?;
    Ok((image_size / p) * (image_size / p))
}

/// Per-scale embedding weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams<T: Element> {
    pub patch_size: usize,
    /// `(p²c)×d` projection.
    pub projection: Tensor<T>,
    /// `n×d` learned position table.
    pub positions: Tensor<T>,
    /// `1×d` classification token.
    pub cls: Tensor<T>,
}

impl<T: Element> PatchEmbedParams<T> {
    pub fn init(
        rng: &mut impl Rng,
        patch_size: usize,
        channels: usize,
        image_size: usize,
        d: usize,
    ) -> Result<Self> {
        let n = patch_count(image_size, patch_size)?;
        let fan = patch_size * patch_size * channels;
        Ok(PatchEmbedParams {
            patch_size,
            projection: xavier(rng, fan, d),
            positions: xavier(rng, n, d),
            cls: Tensor::zeros([1, d]),
        })
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    /// Stores the tensors as `{prefix}.w`, `{prefix}.pos`, `{prefix}.cls`.
    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(format!("{prefix}.w"), self.projection.clone());
        params.insert(format!("{prefix}.pos"), self.positions.clone());
        params.insert(format!("{prefix}.cls"), self.cls.clone());
    }

    pub fn from_params(params: &ParamSet<T>, prefix: &str, patch_size: usize) -> Result<Self> {
        Ok(PatchEmbedParams {
            patch_size,
            projection: params.get(&format!("{prefix}.w"))?.clone(),
            positions: params.get(&format!("{prefix}.pos"))?.clone(),
            cls: params.get(&format!("{prefix}.cls"))?.clone(),
        })
    }
}

/// Graph handles of one scale's embedding weights.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    pub projection: Var,
    pub positions: Var,
    pub cls: Var,
}

impl PatchEmbedVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(PatchEmbedVars {
            projection: bound.var(&format!("{prefix}.w"))?,
            positions: bound.var(&format!("{prefix}.pos"))?,
            cls: bound.var(&format!("{prefix}.cls"))?,
        })
    }
}

/// Embedded patch sequence with the classification token at row 0.
#[derive(Clone, Debug)]
pub struct PatchSequence<T: Element> {
    pub scale_index: usize,
    pub patch_size: usize,
    /// `(n+1)×d`.
    pub tokens: Tensor<T>,
    pub n: usize,
}

/// Records `patches·W_e + E_pos` and returns it along with the full token
/// matrix `[cls; patches·W_e + E_pos]`. The classification token gets no
/// position embedding. `cls_extra`, when given, is added to the cls row.
pub fn record_embedding<T: Element>(
    g: &mut Graph<T>,
    patches: Var,
    p: &PatchEmbedVars,
    cls_extra: Option<Var>,
) -> Result<(Var, Var)> {
    let (n, cols) = g.value(patches).dims2()?;
    let (rows, _) = g.value(p.projection).dims2()?;
    if cols != rows {
        return Err(Error::ShapeMismatch(format!(
            "patches have {cols} columns, projection expects {rows}"
        )));
    }
    if g.value(p.positions).dims2()?.0 != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} patches but {} position rows",
            g.value(p.positions).dims2()?.0
        )));
    }
    let proj = g.matmul(patches, p.projection)?;
    let embedded = g.add(proj, p.positions)?;
    let cls = match cls_extra {
        Some(extra) => g.add(p.cls, extra)?,
        None => p.cls,
    };
    let tokens = g.concat(&[cls, embedded], 0)?;
    Ok((embedded, tokens))
}

/// `tokens[1..] = patches·W_e + E_pos`, `tokens[0] = cls`.
pub fn embed_patches<T: Element>(
    patches: &Tensor<T>,
    params: &PatchEmbedParams<T>,
) -> Result<PatchSequence<T>> {
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = PatchEmbedVars {
        projection: g.constant(params.projection.clone()),
        positions: g.constant(params.positions.clone()),
        cls: g.constant(params.cls.clone()),
    };
    let (_, tokens) = record_embedding(&mut g, x, &vars, None)?;
    Ok(PatchSequence {
        scale_index: 0,
        patch_size: params.patch_size,
        tokens: g.value(tokens).clone(),
        n: patches.dims2()?.0,
    })
}

/// One embedded sequence per scale, in the order of `scales`.
pub fn build_scale_pyramid<T: Element>(
    img: &Tensor<T>,
    scales: &[PatchEmbedParams<T>],
) -> Result<Vec<PatchSequence<T>>> {
    scales
        .iter()
        .enumerate()
        .map(|(i, params)| {
            let patches = tokenize_patches(img, params.patch_size)?;
            let mut seq = embed_patches(&patches, params)?;
            seq.scale_index = i;
            Ok(seq)
        })
        .collect()
}

/// Independently initialized embedding weights for each patch size.
pub fn init_pyramid<T: Element>(
    rng: &mut impl Rng,
    patch_sizes: &[usize],
    channels: usize,
    image_size: usize,
    d: usize,
) -> Result<Vec<PatchEmbedParams<T>>> {
    patch_sizes
        .iter()
        .map(|&p| PatchEmbedParams::init(rng, p, channels, image_size, d))
        .collect()
}

/// Adds a `1×d` row to every row of an `n×d` matrix.
pub fn add_row<T: Element>(g: &mut Graph<T>, x: Var, row: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let r = repeat_rows(g, row, n)?;
    g.add(x, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rng, uniform};
    use proptest::prelude::*;

    fn constant_image(h: usize, w: usize, c: usize, v: f32) -> Micrograph {
        Micrograph::new(Tensor::full([h, w, c], v), None, "const").unwrap()
    }

    #[test]
    fn midpoint_maps_to_zero_and_one_maps_to_one() {
        let out: Tensor<f64> = preprocess_image(&constant_image(10, 7, 3, 0.5), 16).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out: Tensor<f64> = preprocess_image(&constant_image(10, 7, 1, 1.0), 16).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downscales_sem_sized_input() {
        let raw = constant_image(768, 1024, 3, 0.25);
        let out: Tensor<f32> = preprocess_image(&raw, 224).unwrap();
        assert_eq!(out.shape(), &[224, 224, 3]);
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_images() {
        let empty = Micrograph {
            pixels: Tensor::zeros([0, 4, 1]),
            label: None,
            source_id: "e".into(),
        };
        assert!(matches!(preprocess_image::<f64>(&empty, 8), Err(Error::EmptyImage)));
        let rgba = Micrograph {
            pixels: Tensor::zeros([2, 2, 4]),
            label: None,
            source_id: "x".into(),
        };
        assert!(matches!(
            preprocess_image::<f64>(&rgba, 8),
            Err(Error::UnsupportedChannelCount(4))
        ));
    }

    #[test]
    fn patch_counts_match_grid() {
        let img = Tensor::<f32>::zeros([224, 224, 3]);
        assert_eq!(tokenize_patches(&img, 16).unwrap().shape(), &[196, 768]);
        assert_eq!(tokenize_patches(&img, 32).unwrap().shape(), &[49, 3072]);
        assert!(matches!(
            tokenize_patches(&img, 30),
            Err(Error::IndivisiblePatchSize { patch: 30, extent: 224 })
        ));
    }

    #[test]
    fn tiny_round_trip() {
        let img = Tensor::<f64>::from_f64([2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        let p = tokenize_patches(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(reassemble_patches(&p, 2, 2, 1, 1).unwrap(), img);
    }

    #[test]
    fn patches_are_in_raster_order() {
        // 4×4 single-channel image with value = 10·row + col, p = 2.
        let data: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let img = Tensor::<f64>::from_f64([4, 4, 1], &data).unwrap();
        let p = tokenize_patches(&img, 2).unwrap();
        assert_eq!(p.row_slice(0), &[0., 1., 10., 11.]);
        assert_eq!(p.row_slice(1), &[2., 3., 12., 13.]);
        assert_eq!(p.row_slice(2), &[20., 21., 30., 31.]);
    }

    #[test]
    fn zero_patches_give_cls_and_zero_rows() {
        let mut r = rng(1);
        let mut params = PatchEmbedParams::<f64>::init(&mut r, 2, 1, 4, 3).unwrap();
        params.positions = Tensor::zeros([4, 3]);
        params.cls = Tensor::from_f64([1, 3], &[0.1, 0.2, 0.3]).unwrap();
        let seq = embed_patches(&Tensor::zeros([4, 4]), &params).unwrap();
        assert_eq!(seq.tokens.shape(), &[5, 3]);
        assert_eq!(seq.tokens.row_slice(0), params.cls.data());
        assert!(seq.tokens.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_patches() {
        let mut r = rng(2);
        let patches: Tensor<f64> = uniform(&mut r, &[4, 4], 1.0);
        let params = PatchEmbedParams {
            patch_size: 2,
            projection: Tensor::eye(4),
            positions: Tensor::zeros([4, 4]),
            cls: Tensor::zeros([1, 4]),
        };
        let seq = embed_patches(&patches, &params).unwrap();
        assert_eq!(&seq.tokens.data()[4..], patches.data());
    }

    #[test]
    fn embedding_matches_hand_arithmetic() {
        let mut r = rng(3);
        let patches: Tensor<f64> = uniform(&mut r, &[4, 12], 1.0);
        let params = PatchEmbedParams::<f64>::init(&mut r, 2, 3, 4, 5).unwrap();
        let seq = embed_patches(&patches, &params).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut expect = params.positions.at(i, j);
                for k in 0..12 {
                    expect += patches.at(i, k) * params.projection.at(k, j);
                }
                assert!((seq.tokens.at(i + 1, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embedding_rejects_wrong_width() {
        let mut r = rng(4);
        let params = PatchEmbedParams::<f64>::init(&mut r, 2, 3, 4, 5).unwrap();
        assert!(matches!(
            embed_patches(&Tensor::zeros([4, 11]), &params),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pyramid_sizes() {
        let img = Tensor::<f32>::zeros([224, 224, 1]);
        let mut r = rng(5);
        let scales = init_pyramid::<f32>(&mut r, &[16, 28, 32], 1, 224, 8).unwrap();
        let seqs = build_scale_pyramid(&img, &scales).unwrap();
        let ns: Vec<usize> = seqs.iter().map(|s| s.n).collect();
        assert_eq!(ns, vec![196, 64, 49]);
        for s in &seqs {
            assert_eq!(s.tokens.shape(), &[s.n + 1, 8]);
        }
        let single = init_pyramid::<f32>(&mut r, &[224], 1, 224, 8).unwrap();
        assert_eq!(build_scale_pyramid(&img, &single).unwrap()[0].n, 1);
    }

    #[test]
    fn repeated_scales_get_distinct_parameters() {
        let mut r = rng(6);
        let scales = init_pyramid::<f64>(&mut r, &[16, 16], 1, 224, 8).unwrap();
        let img = Tensor::<f64>::zeros([224, 224, 1]);
        let seqs = build_scale_pyramid(&img, &scales).unwrap();
        assert_eq!(seqs[0].n, seqs[1].n);
        assert_ne!(scales[0].projection, scales[1].projection);
        assert_ne!(scales[0].positions, scales[1].positions);
        assert_eq!((seqs[0].scale_index, seqs[1].scale_index), (0, 1));
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(grid_h in 1usize..5, grid_w in 1usize..5, p in 1usize..5, c in prop::sample::select(vec![1usize, 3]), seed in 0u64..1000) {
            let (h, w) = (grid_h * p, grid_w * p);
            let mut r = rng(seed);
            let img: Tensor<f64> = uniform(&mut r, &[h, w, c], 1.0);
            let patches = tokenize_patches(&img, p).unwrap();
            prop_assert_eq!(patches.shape(), &[grid_h * grid_w, p * p * c]);
            prop_assert_eq!(reassemble_patches(&patches, h, w, c, p).unwrap(), img);
        }

        #[test]
        fn embedding_is_linear(a in -3.0f64..3.0, seed in 0u64..1000) {
            let mut r = rng(seed);
            let params = PatchEmbedParams::<f64>::init(&mut r, 2, 1, 4, 3).unwrap();
            let x: Tensor<f64> = uniform(&mut r, &[4, 4], 1.0);
            let e0 = embed_patches(&Tensor::zeros([4, 4]), &params).unwrap().tokens;
            let ex = embed_patches(&x, &params).unwrap().tokens;
            let eax = embed_patches(&x.scale(a), &params).unwrap().tokens;
            for i in 1..5 {
                for j in 0..3 {
                    let lhs = eax.at(i, j) - e0.at(i, j);
                    let rhs = a * (ex.at(i, j) - e0.at(i, j));
                    prop_assert!((lhs - rhs).abs() < 1e-9);
                }
            }
        }
    }
}
