use proptest::prelude::*;
use ttl_tensor::suite::{primitive_suite, uniform};
use ttl_tensor::{grad_check, tnsr, Graph, Tensor, TensorError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_returns_operand() {
    let mut g = Graph::<f32>::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y), g.value(m));
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 5], 0.7));
    let y = g.softmax_rows(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-7);
    }
}

#[test]
fn unit_conv_kernel_scales_input() {
    let mut g = Graph::<f32>::new();
    let data: Vec<f32> = (0..9).map(|i| i as f32 - 4.0).collect();
    let x = g.constant(t(&[1, 1, 3, 3], &data));
    let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    for (a, b) in g.value(y).data().iter().zip(&data) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_output_shapes_follow_stride_arithmetic() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
    let w = g.constant(Tensor::zeros(&[8, 3, 4, 4]));
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 16, 16]);
    let wt = g.constant(Tensor::zeros(&[8, 4, 3, 3]));
    let up = g.conv_transpose2d(y, wt, 2, 1, 1).unwrap();
    assert_eq!(g.shape(up), &[2, 4, 32, 32]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected mismatch, got {:?}", other.map(|_| ())),
    }
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn log_and_normalize_reject_bad_domains() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t(&[3], &[1.0, 0.0, 2.0]));
    assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
    let z = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]));
    assert!(matches!(g.l2_normalize_rows(z), Err(TensorError::Domain { .. })));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.1 - 1.0));
    let y = g.sum(x);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert_eq!(grads.get(y).unwrap().data(), &[1.0]);
}

#[test]
fn half_mean_square_gradient_is_x_over_n() {
    let mut g = Graph::<f64>::new();
    let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.77).sin()).collect();
    let x = g.param(Tensor::new(&[3, 4], data.clone()).unwrap());
    let sq = g.mul(x, x).unwrap();
    let m = g.mean(sq).unwrap();
    let y = g.scale(m, 0.5);
    let grads = g.backward(y).unwrap();
    for (gv, xv) in grads.get(x).unwrap().data().iter().zip(&data) {
        assert!((gv - xv / 12.0).abs() < 1e-15);
    }
}

#[test]
fn conv_relu_mean_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let err = grad_check(
        |g, x| {
            let wv = g.constant(w.clone());
            let c = g.conv2d(x, wv, 1, 1)?;
            let r = g.relu(c);
            g.mean(r)
        },
        &x0,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    // Dyadic point and power-of-two step: every sum is exact.
    let dyadic = Tensor::from_fn(&[4, 3], |i| i as f64 / 64.0 - 0.25);
    let exact = grad_check(|g, x| Ok(g.sum(x)), &dyadic, 1.0 / 1024.0).unwrap();
    assert_eq!(exact, 0.0);
    let near = grad_check(|g, x| Ok(g.sum(x)), &p, 1e-3).unwrap();
    assert!(near < 1e-12);

    let tanh_err = grad_check(
        |g, x| {
            let t = g.tanh(x);
            Ok(g.sum(t))
        },
        &p,
        1e-3,
    )
    .unwrap();
    assert!(tanh_err < 1e-4, "{tanh_err}");

    let lse_err = grad_check(
        |g, x| {
            let e = g.exp(x);
            let s = g.sum(e);
            g.log(s)
        },
        &p,
        1e-3,
    )
    .unwrap();
    assert!(lse_err < 1e-4, "{lse_err}");
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let p = Tensor::new(&[3], vec![1.0, 1e-4, 2.0]).unwrap();
    match grad_check(|g, x| {
        let l = g.log(x)?;
        Ok(g.sum(l))
    }, &p, 1e-3)
    {
        Err(TensorError::Domain { .. }) | Err(TensorError::NonFinite { index: 1 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn every_primitive_passes_grad_check() {
    for seed in [1, 2, 3] {
        for e in primitive_suite(seed).unwrap() {
            assert!(e.max_rel_error < 1e-4, "{} (seed {seed}): {}", e.name, e.max_rel_error);
        }
    }
}

// y = a*b, z = a + y, loss = sum(z*y): a feeds two consumers.
// Expanded: loss = Σ (a + ab)·ab = Σ a²b + a²b², so
// d/da = 2ab + 2ab², d/db = a² + 2a²b.
#[test]
fn fan_out_contributions_accumulate() {
    let (av, bv) = (vec![0.5, -1.25, 2.0], vec![1.5, 0.75, -0.5]);
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::new(&[3], av.clone()).unwrap());
    let b = g.param(Tensor::new(&[3], bv.clone()).unwrap());
    let y = g.mul(a, b).unwrap();
    let z = g.add(a, y).unwrap();
    let zy = g.mul(z, y).unwrap();
    let loss = g.sum(zy);
    let grads = g.backward(loss).unwrap();
    for i in 0..3 {
        let (x, y) = (av[i], bv[i]);
        let da = 2.0 * x * y + 2.0 * x * y * y;
        let db = x * x + 2.0 * x * x * y;
        assert!((grads.get(a).unwrap().data()[i] - da).abs() < 1e-12);
        assert!((grads.get(b).unwrap().data()[i] - db).abs() < 1e-12);
    }
}

#[test]
fn constants_do_not_record_gradients() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::ones(&[2]));
    let p = g.param(Tensor::ones(&[2]));
    let cc = g.tanh(c);
    assert!(!g.requires_grad(cc));
    let y = g.mul(cc, p).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f32> = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0).cast();
        let w: Tensor<f32> = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast();
        let mut g = Graph::<f32>::new();
        let (x, w) = (g.constant(x), g.constant(w));
        let c = g.conv2d(x, w, 2, 1).unwrap();
        let n = g.instance_norm(c, 1e-5).unwrap();
        let r = g.leaky_relu(n, 0.2);
        g.value(r).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn tnsr_round_trip_is_bit_exact(
        shape in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data: Vec<f32> = (0..n).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f32::from_bits((s >> 32) as u32 & 0xff7f_ffff)
        }).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let back = tnsr::decode(&tnsr::encode(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-5.0f32..5.0, 12)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3, 4], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
