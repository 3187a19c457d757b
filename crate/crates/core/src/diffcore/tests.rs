use super::*;
use crate::nn::{rng, uniform};

fn ps(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    entries
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let e = Expr::leaf("x").softmax(1);
    let out = eval(&e, &ps(&[("x", Tensor::zeros([1, 3]))])).unwrap();
    for &v in out.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_at_zero() {
    let e = Expr::leaf("x").sigmoid();
    let out = eval(&e, &ps(&[("x", Tensor::zeros([1]))])).unwrap();
    assert_eq!(out.data()[0], 0.5);
    let g = grad(&e, &ps(&[("x", Tensor::zeros([1]))]), &["x"], None).unwrap();
    assert_eq!(g.get("x").unwrap().data()[0], 0.25);
}

#[test]
fn matmul_ones_gives_threes() {
    let e = Expr::leaf("a").matmul(&Expr::leaf("b"));
    let out = eval(
        &e,
        &ps(&[("a", Tensor::ones([2, 3])), ("b", Tensor::ones([3, 2]))]),
    )
    .unwrap();
    assert_eq!(out.shape(), &[2, 2]);
    assert!(out.data().iter().all(|&v| v == 3.0));
}

#[test]
fn gradient_of_sum_of_squares() {
    let x = Expr::leaf("x");
    let e = x.mul(&x).sum(None);
    let g = grad(&e, &ps(&[("x", t(&[2], &[1.0, 2.0]))]), &["x"], None).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn grad_only_returns_requested_leaves() {
    let e = Expr::leaf("x").mul(&Expr::leaf("y")).sum(None);
    let b = ps(&[("x", Tensor::ones([2])), ("y", Tensor::ones([2]))]);
    let g = grad(&e, &b, &["x"], None).unwrap();
    assert!(g.contains("x"));
    assert!(!g.contains("y"));
    assert!(matches!(grad(&e, &b, &["z"], None), Err(crate::Error::UnknownName(_))));
}

#[test]
fn grad_with_explicit_seed() {
    let e = Expr::leaf("x").scale(3.0);
    let b = ps(&[("x", Tensor::ones([1, 2]))]);
    let g = grad(&e, &b, &["x"], Some(t(&[1, 2], &[1.0, -2.0]))).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[3.0, -6.0]);
    assert!(matches!(
        grad(&e, &b, &["x"], Some(Tensor::ones([2]))),
        Err(crate::Error::ShapeMismatch(_))
    ));
}

#[test]
fn unbound_leaf_and_shape_errors() {
    let e = Expr::leaf("missing").sigmoid();
    assert!(matches!(
        eval::<f64>(&e, &ParamSet::new()),
        Err(crate::Error::UnboundLeaf(_))
    ));
    let e = Expr::leaf("a").matmul(&Expr::leaf("b"));
    let b = ps(&[("a", Tensor::ones([2, 3])), ("b", Tensor::ones([2, 3]))]);
    assert!(matches!(eval(&e, &b), Err(crate::Error::ShapeMismatch(_))));
}

#[test]
fn overflow_is_reported() {
    let e = Expr::leaf("x").exp();
    let b = ps(&[("x", t(&[1], &[1000.0]))]);
    assert!(matches!(eval(&e, &b), Err(crate::Error::NonFiniteResult(_))));
    let e = Expr::leaf("x").log();
    let b = ps(&[("x", t(&[1], &[-1.0]))]);
    assert!(matches!(eval(&e, &b), Err(crate::Error::NonFiniteResult(_))));
}

#[test]
fn softmax_dot_onehot_matches_finite_differences() {
    let mut r = rng(11);
    let logits: Tensor<f64> = uniform(&mut r, &[1, 5], 2.0);
    let onehot = t(&[1, 5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
    let e = Expr::leaf("z").softmax(1).mul(&Expr::constant(onehot)).sum(None);
    let err = finite_diff_check(&e, &ps(&[("z", logits)]), "z", 1e-5).unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn quadratic_form_and_constant() {
    let mut r = rng(3);
    let a: Tensor<f64> = uniform(&mut r, &[4, 4], 1.0);
    let x: Tensor<f64> = uniform(&mut r, &[4, 1], 1.0);
    let xe = Expr::leaf("x");
    let q = xe.transpose().matmul(&Expr::constant(a)).matmul(&xe).sum(None);
    let err = finite_diff_check(&q, &ps(&[("x", x.clone())]), "x", 1e-5).unwrap();
    assert!(err < 1e-6, "rel err {err}");

    // An expression that ignores its parameter: zero gradient both ways.
    let c = Expr::constant(Tensor::ones([2])).sum(None);
    let err = finite_diff_check(&c, &ps(&[("x", x)]), "x", 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn finite_diff_check_rejects_bad_input() {
    let e = Expr::leaf("x").sum(None);
    let b = ps(&[("x", Tensor::ones([2]))]);
    assert!(finite_diff_check(&e, &b, "x", 0.0).is_err());
    assert!(matches!(
        finite_diff_check(&e, &b, "nope", 1e-5),
        Err(crate::Error::UnknownName(_))
    ));
}

/// Every primitive against central differences on 10 random inputs.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = fn(&Expr) -> Expr;
    let positive: &[(&str, Build)] = &[
        ("log", |x| x.log()),
        ("sqrt", |x| x.sqrt()),
    ];
    let general: &[(&str, Build)] = &[
        ("matmul", |x| x.matmul(&x.transpose())),
        ("transpose", |x| x.transpose()),
        ("add", |x| x.add(&x.exp())),
        ("subtract", |x| x.sub(&x.scale(-1.0).tanh())),
        ("multiply", |x| x.mul(&x.sigmoid())),
        ("scalar-broadcast", |x| x.mul(&x.slice(1, 1, 2).slice(0, 0, 1))),
        ("scalar-multiply", |x| x.scale(-2.5)),
        ("concat0", |x| Expr::concat(&[x.clone(), x.exp()], 0)),
        ("concat1", |x| Expr::concat(&[x.tanh(), x.clone()], 1)),
        ("slice", |x| x.slice(1, 1, 3)),
        ("reshape", |x| x.reshape(&[4, 3])),
        ("reduce-sum-axis", |x| x.sum(Some(0))),
        ("mean", |x| x.mean(Some(1))),
        ("mean-all", |x| x.mean(None)),
        ("sigmoid", |x| x.sigmoid()),
        ("relu", |x| x.relu()),
        ("tanh", |x| x.tanh()),
        ("softmax0", |x| x.softmax(0)),
        ("softmax1", |x| x.softmax(1)),
        ("exp", |x| x.exp()),
        ("layer-normalize", |x| x.layer_norm(LAYER_NORM_EPS)),
    ];
    let mut r = rng(2024);
    for (positive_only, table) in [(true, positive), (false, general)] {
        for (name, build) in table {
            for trial in 0..10 {
                let mut x: Tensor<f64> = uniform(&mut r, &[3, 4], 1.5);
                if positive_only {
                    x = x.map(|v| v.abs() + 0.2);
                }
                let out = eval(&build(&Expr::leaf("x")), &ps(&[("x", x.clone())])).unwrap();
                let w: Tensor<f64> = uniform(&mut r, out.shape(), 1.0);
                let obj = build(&Expr::leaf("x")).mul(&Expr::constant(w)).sum(None);
                let err = finite_diff_check(&obj, &ps(&[("x", x)]), "x", 1e-6).unwrap();
                assert!(err < 1e-6, "{name} trial {trial}: rel err {err}");
            }
        }
    }
}

#[test]
fn softmax_normalizes_and_is_positive() {
    let mut r = rng(5);
    for _ in 0..20 {
        let x: Tensor<f64> = uniform(&mut r, &[4, 6], 30.0);
        let y = eval(&Expr::leaf("x").softmax(1), &ps(&[("x", x)])).unwrap();
        for row in y.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
    // Large logits do not overflow.
    let y = eval(
        &Expr::leaf("x").softmax(1),
        &ps(&[("x", t(&[1, 2], &[1000.0, 999.0]))]),
    )
    .unwrap();
    assert!(y.is_finite());
}

#[test]
fn eval_is_bit_reproducible() {
    let mut r = rng(8);
    let x: Tensor<f64> = uniform(&mut r, &[5, 5], 1.0);
    let e = Expr::leaf("x")
        .matmul(&Expr::leaf("x"))
        .layer_norm(LAYER_NORM_EPS)
        .softmax(1)
        .sum(None);
    let b = ps(&[("x", x)]);
    let a = eval(&e, &b).unwrap();
    let c = eval(&e, &b).unwrap();
    assert_eq!(a.data()[0].to_bits(), c.data()[0].to_bits());
}

#[test]
fn shared_subexpressions_accumulate_gradients() {
    // y = s + s with s = sum(x): dy/dx = 2.
    let s = Expr::leaf("x").sum(None);
    let y = s.add(&s);
    let g = grad(&y, &ps(&[("x", Tensor::ones([3]))]), &["x"], None).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn f32_evaluation_works() {
    let e = Expr::leaf("x").sigmoid().sum(None);
    let b: ParamSet<f32> = [("x".to_string(), Tensor::<f32>::zeros([2]))]
        .into_iter()
        .collect();
    let v = eval(&e, &b).unwrap();
    assert_eq!(v.dtype(), DType::F32);
    assert_eq!(v.data()[0], 1.0f32);
}
