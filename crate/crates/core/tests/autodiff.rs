use declip::tensor::gradcheck::{grad_check, grad_check_many};
use declip::tensor::{Conv2dSpec, Graph, Tensor};
use declip::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn matmul_identity_and_hand_case() {
    let g = Graph::<f64>::new();
    let i = g.constant(Tensor::eye(2));
    assert_eq!(i.matmul(i).unwrap().value(), Tensor::eye(2));

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let c = a.matmul(b).unwrap().value();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|v| v.shape())),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    let w = randn(&[3, 2], &mut rng);
    let err = grad_check_many(
        |g, v| {
            let wv = g.constant(w.clone());
            Ok(v[0].matmul(v[1])?.mul(wv)?.sum())
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn elementwise_values_and_domain_errors() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let e = x.exp().value();
    assert_eq!(e.data()[0], 1.0);
    assert!((e.data()[1] - std::f64::consts::E).abs() < 1e-15);

    assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    let one = g.scalar(1.0);
    assert!(matches!(one.div(x), Err(Error::Domain { op: "div", .. })));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = g.constant(randn(&[10], &mut rng));
    let back = r.exp().log().unwrap().value();
    assert!(back.max_abs_diff(&r.value()) < 1e-12);
}

#[test]
fn mul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&[4, 3], &mut rng);
    let b = randn(&[4, 3], &mut rng);
    let err = grad_check_many(|_, v| Ok(v[0].mul(v[1])?.sum()), &[a, b], 1e-5).unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn softmax_rows_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    assert_eq!(x.softmax_rows().unwrap().value().data(), &[0.25; 4]);

    let big = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]));
    let s = big.softmax_rows().unwrap().value();
    assert_eq!(s.data()[0], 1.0);
    assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    let ls = big.log_softmax_rows().unwrap().value();
    assert_eq!(ls.data()[0], 0.0);
    assert_eq!(ls.data()[1], -1000.0);

    let nan = g.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(nan.softmax_rows(), Err(Error::Numeric(_))));
}

#[test]
fn l2_normalize_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8]]));
    let y = x.l2_normalize_rows().unwrap().value();
    assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    assert!((y.data()[2] - 0.6).abs() < 1e-15 && (y.data()[3] - 0.8).abs() < 1e-15);

    let z = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    assert!(matches!(
        z.l2_normalize_rows(),
        Err(Error::DegenerateEmbedding { row: 1, .. })
    ));
}

#[test]
fn l2_normalize_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[4, 5], &mut rng);
    let w = randn(&[4, 5], &mut rng);
    let err = grad_check(
        |g, v| Ok(v.l2_normalize_rows()?.mul(g.constant(w.clone()))?.sum()),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn cosine_sim_matrix_cases() {
    let g = Graph::<f64>::new();
    let e = g.constant(Tensor::eye(3));
    assert_eq!(e.cosine_sim_matrix(e).unwrap().value(), Tensor::eye(3));

    let a = g.constant(Tensor::from_rows(&[vec![0.6, 0.8]]));
    let b = g.constant(Tensor::from_rows(&[vec![-0.6, -0.8]]));
    assert!((a.cosine_sim_matrix(b).unwrap().item() + 1.0).abs() < 1e-15);

    let c = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.cosine_sim_matrix(c), Err(Error::Dimension { .. })));
}

#[test]
fn cosine_sim_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = Graph::<f64>::new();
    let a = g.constant(randn(&[6, 8], &mut rng)).l2_normalize_rows().unwrap();
    let b = g.constant(randn(&[5, 8], &mut rng)).l2_normalize_rows().unwrap();
    let s = a.cosine_sim_matrix(b).unwrap().value();
    let (av, bv) = (a.value(), b.value());
    for i in 0..6 {
        for j in 0..5 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += av.at2(i, k) * bv.at2(j, k);
            }
            assert!((s.at2(i, j) - acc).abs() < 1e-6);
            assert!(s.at2(i, j).abs() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn stop_gradient_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&[3, 2], &mut rng);

    let g = Graph::new();
    let v = g.leaf(x.clone());
    let s = v.stop_gradient();
    assert_eq!(s.value(), x);
    let grads = g.backward(s.sum()).unwrap();
    assert!(grads.wrt(v).data().iter().all(|&d| d == 0.0));

    // d/dx sum(x * sg(x)) = sg(x) = x
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let out = v.mul(v.stop_gradient()).unwrap().sum();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.wrt(v), x);
}

#[test]
fn grad_check_with_frozen_branch_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randn(&[4], &mut rng);
    // d/dx sum(x * sg(x)) = x, not 2x
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let grads = g.backward(v.mul(v.stop_gradient()).unwrap().sum()).unwrap();
    assert!(grads.wrt(v).max_abs_diff(&x) == 0.0);

    let c = x.clone();
    let err = grad_check(
        |g, v| {
            let frozen = g.constant(c.clone()).stop_gradient();
            Ok(v.mul(frozen)?.add(v.mul(v)?)?.sum())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "rel err {err}");
}

#[test]
fn sum_of_squares_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&[7], &mut rng);
    let err = grad_check(|_, v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
    assert!(err <= 1e-8, "rel err {err}");
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let g = Graph::<f64>::new();
    let v = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v), Err(Error::Shape(_))));
    let s = v.sum();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
}

/// Every differentiable op, checked on 20 seeds at 1e-4.
#[test]
fn every_op_passes_grad_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let w = randn(&[3, 4], &mut rng);
        let check = |name: &str, err: f64| assert!(err <= 1e-4, "{name} seed {seed}: {err}");

        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        let pos = Tensor::from_fn(&[3, 4], |i| 0.5 + (i as f64 * 0.37).sin().abs());

        let e = grad_check_many(
            |g, v| Ok(v[0].add(v[1])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        check("add", e);
        let e = grad_check_many(
            |g, v| Ok(v[0].sub(v[1])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        check("sub", e);
        let e = grad_check_many(
            |g, v| Ok(v[0].div(v[1])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), pos.clone()],
            1e-5,
        )
        .unwrap();
        check("div", e);
        let e = grad_check(|g, v| Ok(v.exp().mul(g.constant(w.clone()))?.sum()), &a, 1e-5).unwrap();
        check("exp", e);
        let e = grad_check(|g, v| Ok(v.log()?.mul(g.constant(w.clone()))?.sum()), &pos, 1e-5).unwrap();
        check("log", e);
        let e = grad_check(|g, v| Ok(v.neg().scale(2.5).mul(g.constant(w.clone()))?.sum()), &a, 1e-5).unwrap();
        check("neg/scale", e);
        let e = grad_check(|g, v| Ok(v.gelu().mul(g.constant(w.clone()))?.sum()), &a, 1e-5).unwrap();
        check("gelu", e);
        let e = grad_check(|g, v| Ok(v.relu().mul(g.constant(w.clone()))?.sum()), &a, 1e-5).unwrap();
        check("relu", e);
        let e = grad_check(|g, v| Ok(v.softmax_rows()?.mul(g.constant(w.clone()))?.sum()), &a, 1e-5).unwrap();
        check("softmax", e);
        let e = grad_check(|g, v| Ok(v.log_softmax_rows()?.mul(g.constant(w.clone()))?.sum()), &a, 1e-5)
            .unwrap();
        check("log_softmax", e);
        let e = grad_check(|_, v| Ok(v.transpose()?.pick(&[1, 0, 2, 1])?.mean()), &a, 1e-5).unwrap();
        check("transpose/pick/mean", e);
        let e = grad_check(
            |g, v| Ok(v.gather_rows(&[2, 0, 2])?.reshape(&[12])?.mul(g.constant(randn_fixed(12)))?.sum()),
            &a,
            1e-5,
        )
        .unwrap();
        check("gather/reshape", e);
        let s = Tensor::scalar(0.7 + seed as f64 * 0.01);
        let e = grad_check_many(
            |g, v| Ok(v[0].mul(v[1])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), s.clone()],
            1e-5,
        )
        .unwrap();
        check("scalar-broadcast mul", e);
        let bias = randn(&[4], &mut rng);
        let e = grad_check_many(
            |g, v| Ok(v[0].add_row(v[1])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), bias.clone()],
            1e-5,
        )
        .unwrap();
        check("add_row", e);
        let gain = randn(&[4], &mut rng);
        let e = grad_check_many(
            |g, v| Ok(v[0].layer_norm(v[1], v[2])?.mul(g.constant(w.clone()))?.sum()),
            &[a.clone(), gain, bias],
            1e-5,
        )
        .unwrap();
        check("layer_norm", e);
        let c = randn(&[5, 4], &mut rng);
        let e = grad_check_many(
            |g, v| Ok(v[0].matmul_t(v[1])?.mul(g.constant(randn_fixed(15).reshape(&[3, 5])?))?.sum()),
            &[a.clone(), c],
            1e-5,
        )
        .unwrap();
        check("matmul_t", e);

        // conv + pool
        let x = randn(&[2, 2, 5, 5], &mut rng);
        let k = randn(&[3, 2, 3, 3], &mut rng);
        let kb = randn(&[3], &mut rng);
        let e = grad_check_many(
            |g, v| {
                let y = v[0].conv2d(v[1], v[2], Conv2dSpec { stride: 2, padding: 1 })?;
                let n = declip::tensor::numel(&y.shape());
                let wy = g.constant(randn_fixed(n).reshape(&y.shape())?);
                Ok(y.mul(wy)?.sum().add(y.global_avg_pool()?.mul(y.global_avg_pool()?)?.sum())?)
            },
            &[x, k, kb],
            1e-5,
        )
        .unwrap();
        check("conv2d/pool", e);

        // attention over 2 sequences of length 3, width 4, 2 heads
        let qkv = randn(&[6, 12], &mut rng);
        let e = grad_check(
            |g, v| {
                let y = v.attention(2, 3, 2, &[3, 2])?;
                Ok(y.mul(g.constant(randn_fixed(24).reshape(&[6, 4])?))?.sum())
            },
            &qkv,
            1e-5,
        )
        .unwrap();
        check("attention", e);
    }
}

fn randn_fixed(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n], |i| ((i as f64 + 1.0) * 0.731).sin())
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let base = randn(&[4, 12], &mut rng);
    let mut other = base.clone();
    // change key/value of position 3 (masked for length 3)
    for j in 4..12 {
        other.data_mut()[3 * 12 + j] += 5.0;
    }
    let g = Graph::<f64>::new();
    let y1 = g.constant(base).attention(1, 4, 2, &[3]).unwrap().value();
    let y2 = g.constant(other).attention(1, 4, 2, &[3]).unwrap().value();
    for t in 0..3 {
        for j in 0..4 {
            assert_eq!(y1.at2(t, j), y2.at2(t, j));
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 35)) {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![5, 7], vals).unwrap());
        let s = x.softmax_rows().unwrap().value();
        for r in 0..5 {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(vals in proptest::collection::vec(0.1f64..10.0, 12), signs in proptest::collection::vec(any::<bool>(), 12)) {
        let data: Vec<f64> = vals.iter().zip(&signs).map(|(&v, &s)| if s { v } else { -v }).collect();
        let g = Graph::<f64>::new();
        let y = g.constant(Tensor::new(vec![3, 4], data).unwrap()).l2_normalize_rows().unwrap().value();
        for r in 0..3 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn stop_gradient_zeroes_upstream(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vals).unwrap());
        let frozen = x.exp().stop_gradient();
        let out = frozen.mul(frozen).unwrap().sum();
        let grads = g.backward(out).unwrap();
        prop_assert!(grads.wrt(x).data().iter().all(|&d| d == 0.0));
    }
}
