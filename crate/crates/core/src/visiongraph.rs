//! k-nearest-neighbor patch graphs, virtual-node augmentation and Chebyshev
//! spectral graph convolution.

use rand::Rng;

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::xavier;

/// Default Chebyshev polynomial order.
pub const DEFAULT_CHEB_ORDER: usize = 3;

/// Binary undirected adjacency without self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Adjacency {
            n,
            bits: vec![false; n * n],
        }
    }

    /// Builds from a dense 0/1 matrix; nonzero entries are edges.
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut a = Adjacency::empty(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::ShapeMismatch(format!("row {i} has {} entries, expected {n}", r.len())));
            }
            for (j, &v) in r.iter().enumerate() {
                a.bits[i * n + j] = v != 0;
            }
        }
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn connect(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
        self.bits[j * self.n + i] = true;
    }

    pub fn degree(&self, i: usize) -> usize {
        self.bits[i * self.n..(i + 1) * self.n].iter().filter(|&&b| b).count()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// First `(i, j)` with `A_ij ≠ A_ji`, if any.
    pub fn asymmetry(&self) -> Option<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .find(|&(i, j)| self.has_edge(i, j) != self.has_edge(j, i))
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new([self.n, self.n], data).expect("n×n")
    }
}

/// Symmetric kNN graph under Euclidean distance between rows of `features`.
///
/// `j` is a neighbor of `i` when it ranks among the `k` closest other rows,
/// ordered by distance then index. An edge exists when either endpoint
/// selects the other.
pub fn build_knn_graph<T: Element>(features: &Tensor<T>, k: usize) -> Result<Adjacency> {
    let (n, d) = features.dims2()?;
    if k == 0 || k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let x = features.to_f64_vec();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = s;
            dist[j * n + i] = s;
        }
    }
    let mut adj = Adjacency::empty(n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            adj.connect(i, j);
        }
    }
    Ok(adj)
}

/// A patch graph with the virtual node at index `n`.
#[derive(Clone, Debug)]
pub struct VisionGraph<T: Element> {
    /// `(n+1)×(n+1)`; the last row and column connect to every patch.
    pub adjacency: Adjacency,
    /// `(n+1)×d`; the last row is the virtual-node vector.
    pub features: Tensor<T>,
    pub k: usize,
    /// Normalized operator of `adjacency`.
    pub operator: Tensor<T>,
}

/// Appends a node adjacent to every existing node.
pub fn augment_adjacency(a: &Adjacency) -> Result<Adjacency> {
    if let Some((i, j)) = a.asymmetry() {
        return Err(Error::AsymmetricInput(i, j));
    }
    let n = a.len();
    let mut out = Adjacency::empty(n + 1);
    for (i, j) in a.edges() {
        out.connect(i, j);
    }
    for i in 0..n {
        out.connect(i, n);
    }
    Ok(out)
}

/// Adds the virtual node: new adjacency row/column and `vn` as the last
/// feature row.
pub fn augment_virtual_node<T: Element>(
    a: &Adjacency,
    x: &Tensor<T>,
    vn: &Tensor<T>,
    k: usize,
) -> Result<VisionGraph<T>> {
    let (n, d) = x.dims2()?;
    if n != a.len() || vn.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} adjacency rows, {n}×{d} features, virtual node of length {}",
            a.len(),
            vn.len()
        )));
    }
    let adjacency = augment_adjacency(a)?;
    let operator = normalized_operator(&adjacency)?;
    let features = Tensor::vstack(&[x, &vn.reshape([1, d])?])?;
    Ok(VisionGraph {
        adjacency,
        features,
        k,
        operator,
    })
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the row sums of `A + I`.
pub fn normalized_operator<T: Element>(a: &Adjacency) -> Result<Tensor<T>> {
    if let Some((i, j)) = a.asymmetry() {
        return Err(Error::AsymmetricInput(i, j));
    }
    let n = a.len();
    let mut deg = Vec::with_capacity(n);
    for i in 0..n {
        let d = a.degree(i) + usize::from(!a.has_edge(i, i));
        if d == 0 {
            return Err(Error::ZeroDegreeNode(i));
        }
        deg.push(d);
    }
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j || a.has_edge(i, j) {
                // One rounding per entry: the degree product is an exact integer.
                out.set(i, j, T::c(1.0 / ((deg[i] * deg[j]) as f64).sqrt()));
            }
        }
    }
    Ok(out)
}

/// Records `[X, L̂X, 2L̂(L̂X) − X, …]`, `order` terms in total.
pub fn record_cheb_apply<T: Element>(
    g: &mut Graph<T>,
    lhat: Var,
    x: Var,
    order: usize,
) -> Result<Vec<Var>> {
    if order == 0 {
        return Err(Error::InvalidArgument("Chebyshev order must be at least 1".into()));
    }
    let (m, m2) = g.value(lhat).dims2()?;
    let (n, _) = g.value(x).dims2()?;
    if m != m2 || m != n {
        return Err(Error::ShapeMismatch(format!(
            "operator {m}×{m2} applied to {n} feature rows"
        )));
    }
    let mut terms = vec![x];
    if order > 1 {
        terms.push(g.matmul(lhat, x)?);
    }
    for k in 2..order {
        let lt = g.matmul(lhat, terms[k - 1])?;
        let twice = g.scale(lt, 2.0)?;
        terms.push(g.sub(twice, terms[k - 2])?);
    }
    Ok(terms)
}

/// `relu(Σ_k T_k(L̂) X Θ_k)`.
pub fn record_cheb_conv<T: Element>(g: &mut Graph<T>, lhat: Var, x: Var, thetas: &[Var]) -> Result<Var> {
    let d = g.shape(x)[1];
    for &t in thetas {
        if g.value(t).dims2()? != (d, d) {
            return Err(Error::ShapeMismatch(format!(
                "filter {:?} for feature width {d}",
                g.shape(t)
            )));
        }
    }
    let terms = record_cheb_apply(g, lhat, x, thetas.len())?;
    let mut acc = g.matmul(terms[0], thetas[0])?;
    for (&t, &theta) in terms.iter().zip(thetas).skip(1) {
        let y = g.matmul(t, theta)?;
        acc = g.add(acc, y)?;
    }
    g.relu(acc)
}

/// `T_k(L̂)·X` for `k < order`, via the three-term recurrence.
pub fn cheb_apply<T: Element>(lhat: &Tensor<T>, x: &Tensor<T>, order: usize) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let l = g.constant(lhat.clone());
    let xv = g.constant(x.clone());
    let terms = record_cheb_apply(&mut g, l, xv, order)?;
    Ok(terms.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Chebyshev filter weights, one `d×d` matrix per polynomial order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebFilterBank<T: Element> {
    pub weights: Vec<Tensor<T>>,
}

impl<T: Element> ChebFilterBank<T> {
    pub fn init(rng: &mut impl Rng, order: usize, d: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("Chebyshev order must be at least 1".into()));
        }
        Ok(ChebFilterBank {
            weights: (0..order).map(|_| xavier(rng, d, d)).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.weights.len()
    }

    /// Stores the weights as `{prefix}.theta{k}`.
    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        for (k, w) in self.weights.iter().enumerate() {
            params.insert(theta_name(prefix, k), w.clone());
        }
    }
}

pub fn theta_name(prefix: &str, k: usize) -> String {
    format!("{prefix}.theta{k}")
}

/// Handles of `{prefix}.theta0..theta{order-1}`.
pub fn bound_thetas(bound: &BoundParams, prefix: &str, order: usize) -> Result<Vec<Var>> {
    (0..order).map(|k| bound.var(&theta_name(prefix, k))).collect()
}

/// Node embeddings `E`; row `n` is the virtual node.
pub fn cheb_conv<T: Element>(graph: &VisionGraph<T>, bank: &ChebFilterBank<T>) -> Result<Tensor<T>> {
    if bank.weights.is_empty() {
        return Err(Error::InvalidArgument("empty filter bank".into()));
    }
    let mut g = Graph::new();
    let l = g.constant(graph.operator.clone());
    let x = g.constant(graph.features.clone());
    let thetas: Vec<Var> = bank.weights.iter().map(|w| g.constant(w.clone())).collect();
    let e = record_cheb_conv(&mut g, l, x, &thetas)?;
    Ok(g.value(e).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::nn::{rng, uniform};
    use nalgebra::DMatrix;
    use rand::Rng;
    use proptest::prelude::*;

    fn dense(t: &Tensor<f64>) -> DMatrix<f64> {
        let (r, c) = t.dims2().unwrap();
        DMatrix::from_row_slice(r, c, t.data())
    }

    fn random_adjacency(r: &mut impl Rng, n: usize, p: f64) -> Adjacency {
        let mut a = Adjacency::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                if r.random_bool(p) {
                    a.connect(i, j);
                }
            }
        }
        a
    }

    #[test]
    fn collinear_points() {
        let x = Tensor::<f64>::from_f64([3, 1], &[0.0, 1.0, 5.0]).unwrap();
        let a = build_knn_graph(&x, 1).unwrap();
        assert_eq!(a.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn two_nodes() {
        let x = Tensor::<f64>::from_f64([2, 2], &[0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(build_knn_graph(&x, 1).unwrap().edges(), vec![(0, 1)]);
        assert!(matches!(build_knn_graph(&x, 2), Err(Error::KTooLarge { k: 2, n: 2 })));
        assert!(matches!(build_knn_graph(&x, 0), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        // Rows 1 and 2 are equidistant from row 0; row 0 picks 1.
        // Rows 1 and 2 coincide, so each picks the other.
        let x = Tensor::<f64>::from_f64([3, 1], &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(build_knn_graph(&x, 1).unwrap().edges(), vec![(0, 1), (1, 2)]);
        // Three coincident points: 0→1, 1→0, 2→0.
        let x = Tensor::<f64>::zeros([3, 2]);
        assert_eq!(build_knn_graph(&x, 1).unwrap().edges(), vec![(0, 1), (0, 2)]);
    }

    /// Independent kNN: for each i, j is selected when fewer than k other
    /// nodes beat it under (distance, index) order.
    fn knn_oracle(x: &[Vec<f64>], k: usize) -> Vec<(usize, usize)> {
        let n = x.len();
        let d = |a: usize, b: usize| -> f64 { x[a].iter().zip(&x[b]).map(|(p, q)| (p - q).powi(2)).sum() };
        let mut edges = std::collections::BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let beats = (0..n)
                    .filter(|&m| m != i && m != j)
                    .filter(|&m| d(i, m) < d(i, j) || (d(i, m) == d(i, j) && m < j))
                    .count();
                if beats < k {
                    edges.insert((i.min(j), i.max(j)));
                }
            }
        }
        edges.into_iter().collect()
    }

    #[test]
    fn augmentation_degrees() {
        let x = Tensor::<f64>::zeros([3, 2]);
        let vn = Tensor::<f64>::ones([1, 2]);
        let g = augment_virtual_node(&Adjacency::empty(3), &x, &vn, 1).unwrap();
        assert_eq!(g.adjacency.degree(3), 3);
        assert_eq!(g.features.shape(), &[4, 2]);
        assert_eq!(g.features.row_slice(3), &[1.0, 1.0]);

        let mut full = Adjacency::empty(3);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            full.connect(i, j);
        }
        let g = augment_virtual_node(&full, &x, &vn, 2).unwrap();
        assert!((0..4).all(|i| g.adjacency.degree(i) == 3));

        let one = Tensor::<f64>::zeros([1, 2]);
        let g = augment_virtual_node(&Adjacency::empty(1), &one, &vn, 0).unwrap();
        assert_eq!(g.adjacency.edges(), vec![(0, 1)]);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = Adjacency::from_dense(&[vec![0, 1], vec![0, 0]]).unwrap();
        assert!(matches!(augment_adjacency(&a), Err(Error::AsymmetricInput(0, 1))));
        assert!(matches!(normalized_operator::<f64>(&a), Err(Error::AsymmetricInput(0, 1))));
    }

    #[test]
    fn operator_small_cases() {
        let a = Adjacency::from_dense(&[vec![0, 1], vec![1, 0]]).unwrap();
        let l: Tensor<f64> = normalized_operator(&a).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.5), "{:?}", l.data());

        let a = Adjacency::from_dense(&[vec![0, 1, 0], vec![1, 0, 0], vec![0, 0, 0]]).unwrap();
        let l: Tensor<f64> = normalized_operator(&a).unwrap();
        assert_eq!(l.row_slice(2), &[0.0, 0.0, 1.0]);
        assert_eq!(l.at(0, 2), 0.0);
    }

    #[test]
    fn spectral_radius_at_most_one() {
        let mut r = rng(17);
        for n in [2usize, 5, 12, 31, 50] {
            for p in [0.1, 0.5, 0.9] {
                let a = random_adjacency(&mut r, n, p);
                let l: Tensor<f64> = normalized_operator(&a).unwrap();
                let m = dense(&l);
                assert!((&m - m.transpose()).abs().max() < 1e-10);
                let eig = m.symmetric_eigen();
                let radius = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                assert!(radius <= 1.0 + 1e-8, "n={n} p={p}: radius {radius}");
            }
        }
    }

    #[test]
    fn cheb_base_cases() {
        let mut r = rng(4);
        let l: Tensor<f64> = normalized_operator(&random_adjacency(&mut r, 4, 0.5)).unwrap();
        let x: Tensor<f64> = uniform(&mut r, &[4, 3], 1.0);
        let t1 = cheb_apply(&l, &x, 1).unwrap();
        assert_eq!(t1, vec![x.clone()]);
        let t2 = cheb_apply(&l, &x, 2).unwrap();
        assert_eq!(t2[1], l.matmul(&x).unwrap());
        assert!(cheb_apply(&l, &x, 0).is_err());
        assert!(matches!(
            cheb_apply(&l, &Tensor::zeros([3, 3]), 2),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cheb_matches_spectral_polynomial() {
        // T_k(L̂) = V cos(k·arccos Λ) Vᵀ, evaluated by eigendecomposition.
        let mut r = rng(9);
        for _ in 0..10 {
            let a = random_adjacency(&mut r, 4, 0.5);
            let l: Tensor<f64> = normalized_operator(&a).unwrap();
            let x: Tensor<f64> = uniform(&mut r, &[4, 3], 1.0);
            let terms = cheb_apply(&l, &x, 4).unwrap();
            let eig = dense(&l).symmetric_eigen();
            for (k, term) in terms.iter().enumerate() {
                let lam = eig
                    .eigenvalues
                    .map(|v| (k as f64 * v.clamp(-1.0, 1.0).acos()).cos());
                let tk = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
                let expect = tk * dense(&x);
                assert!((dense(term) - expect).abs().max() < 1e-6, "k={k}");
            }
        }
    }

    #[test]
    fn third_term_recurrence() {
        let mut r = rng(10);
        let l: Tensor<f64> = normalized_operator(&random_adjacency(&mut r, 6, 0.4)).unwrap();
        let x: Tensor<f64> = uniform(&mut r, &[6, 2], 1.0);
        let terms = cheb_apply(&l, &x, 3).unwrap();
        let lx = l.matmul(&x).unwrap();
        let expect = l.matmul(&lx).unwrap().scale(2.0).zip_map(&x, |a, b| a - b).unwrap();
        assert!(terms[2].zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-10);
    }

    fn sample_graph(r: &mut impl Rng, n: usize, d: usize, k: usize) -> VisionGraph<f64> {
        let x: Tensor<f64> = uniform(r, &[n, d], 1.0);
        let vn: Tensor<f64> = uniform(r, &[1, d], 1.0);
        let a = build_knn_graph(&x, k).unwrap();
        augment_virtual_node(&a, &x, &vn, k).unwrap()
    }

    #[test]
    fn conv_trivial_filters() {
        let mut r = rng(12);
        let g = sample_graph(&mut r, 5, 3, 2);
        let zero = ChebFilterBank {
            weights: vec![Tensor::zeros([3, 3]); 3],
        };
        assert!(cheb_conv(&g, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let ident = ChebFilterBank {
            weights: vec![Tensor::eye(3)],
        };
        assert_eq!(cheb_conv(&g, &ident).unwrap(), g.features.map(|v| v.max(0.0)));
        let bad = ChebFilterBank {
            weights: vec![Tensor::zeros([2, 2])],
        };
        assert!(matches!(cheb_conv(&g, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_matches_sum_of_terms() {
        let mut r = rng(13);
        let g = sample_graph(&mut r, 6, 4, 2);
        let bank = ChebFilterBank::<f64>::init(&mut r, 3, 4).unwrap();
        let terms = cheb_apply(&g.operator, &g.features, 3).unwrap();
        let mut acc = Tensor::zeros([7, 4]);
        for (t, w) in terms.iter().zip(&bank.weights) {
            acc.add_assign(&t.matmul(w).unwrap()).unwrap();
        }
        let expect = acc.map(|v| v.max(0.0));
        let e = cheb_conv(&g, &bank).unwrap();
        assert!(e.zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn theta_gradients_match_finite_differences() {
        let mut r = rng(14);
        let g = sample_graph(&mut r, 6, 4, 2);
        let bank = ChebFilterBank::<f64>::init(&mut r, 3, 4).unwrap();
        let mut params = ParamSet::new();
        bank.insert_into(&mut params, "cheb");
        let w: Tensor<f64> = uniform(&mut r, &[7, 4], 1.0);
        let (lhat, x) = (g.operator.clone(), g.features.clone());
        let obj = move |gr: &mut Graph<f64>, b: &BoundParams| {
            let l = gr.constant(lhat.clone());
            let xv = gr.constant(x.clone());
            let th = bound_thetas(b, "cheb", 3)?;
            let e = record_cheb_conv(gr, l, xv, &th)?;
            let wv = gr.constant(w.clone());
            let y = gr.mul(e, wv)?;
            gr.sum(y, None)
        };
        for k in 0..3 {
            let err = finite_diff_check(&obj, &params, &theta_name("cheb", k), 1e-6).unwrap();
            assert!(err < 1e-5, "theta{k}: {err}");
        }
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(seed in 0u64..500, n in 2usize..9, k in 1usize..8, grid in proptest::bool::ANY) {
            prop_assume!(k < n);
            let mut r = rng(seed);
            // Grid-valued points exercise distance ties.
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| if grid { r.random_range(0..3) as f64 } else { r.random_range(-1.0..1.0) }).collect())
                .collect();
            let flat: Vec<f64> = pts.iter().flatten().copied().collect();
            let x = Tensor::<f64>::from_f64([n, 2], &flat).unwrap();
            let a = build_knn_graph(&x, k).unwrap();
            prop_assert!(a.asymmetry().is_none());
            prop_assert!((0..n).all(|i| !a.has_edge(i, i) && a.degree(i) >= k));
            prop_assert_eq!(a.edges(), knn_oracle(&pts, k));
        }

        #[test]
        fn conv_is_permutation_equivariant(seed in 0u64..200, n in 2usize..8) {
            let mut r = rng(seed);
            let x: Tensor<f64> = uniform(&mut r, &[n, 3], 1.0);
            let vn: Tensor<f64> = uniform(&mut r, &[1, 3], 1.0);
            let bank = ChebFilterBank::<f64>::init(&mut r, 3, 3).unwrap();
            let k = 1 + seed as usize % (n - 1);
            let a = build_knn_graph(&x, k).unwrap();
            let g = augment_virtual_node(&a, &x, &vn, k).unwrap();
            let e = cheb_conv(&g, &bank).unwrap();

            // Reverse the patch order; the virtual node stays last.
            let perm: Vec<usize> = (0..n).rev().collect();
            let mut pa = Adjacency::empty(n);
            for (i, j) in a.edges() {
                pa.connect(perm[i], perm[j]);
            }
            let mut px = Tensor::zeros([n, 3]);
            for i in 0..n {
                for c in 0..3 {
                    px.set(perm[i], c, x.at(i, c));
                }
            }
            let pg = augment_virtual_node(&pa, &px, &vn, k).unwrap();
            let pe = cheb_conv(&pg, &bank).unwrap();
            for i in 0..n {
                for c in 0..3 {
                    prop_assert!((pe.at(perm[i], c) - e.at(i, c)).abs() < 1e-6);
                }
            }
            for c in 0..3 {
                prop_assert!((pe.at(n, c) - e.at(n, c)).abs() < 1e-6);
            }
        }
    }
}
