use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttl_core::nets::*;
use ttl_tensor::suite::uniform;
use ttl_tensor::{grad_check_many, Graph, Tensor, TensorError, Var};

fn cfg() -> ModelConfig {
    ModelConfig {
        gen_channels: 4,
        res_blocks: 2,
        disc_channels: 4,
        feature_dim: 6,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn images(seed: u64, n: usize, s: usize) -> Tensor {
    uniform(&mut rng(seed), &[n, 3, s, s], -1.0, 1.0).cast()
}

#[test]
fn generator_shapes_and_range() {
    let g: Generator = Generator::new(&cfg(), &mut rng(1)).unwrap();
    let out = g.translate(&images(2, 3, 16)).unwrap();
    assert_eq!(out.shape(), &[3, 3, 16, 16]);
    assert!(out.data().iter().all(|v| v.abs() <= 1.0));
    let one = g.generator_forward(&images(2, 1, 16).reshape(&[3, 16, 16]).unwrap()).unwrap();
    assert_eq!(one.shape(), &[3, 16, 16]);
    assert!(g.translate(&images(2, 1, 10)).is_err());
}

#[test]
fn encoder_taps_have_documented_shapes() {
    let g: Generator = Generator::new(&cfg(), &mut rng(1)).unwrap();
    assert_eq!(g.tap_channels(), [4, 8, 16, 16, 16]);
    let img = images(3, 1, 16).reshape(&[3, 16, 16]).unwrap();
    let taps = g.encoder_features(&img, &[4, 0, 2]).unwrap();
    assert_eq!(taps[0].shape(), &[16, 4, 4]);
    assert_eq!(taps[1].shape(), &[4, 16, 16]);
    assert_eq!(taps[2].shape(), &[16, 4, 4]);
    assert!(g.encoder_features(&img, &[5]).is_err());
}

#[test]
fn odd_residual_depth_taps_after_the_lower_middle_block() {
    let g: Generator = Generator::new(&ModelConfig { res_blocks: 3, ..cfg() }, &mut rng(1)).unwrap();
    let img = images(3, 1, 8).reshape(&[3, 8, 8]).unwrap();
    let taps = g.encoder_features(&img, &[3, 4]).unwrap();
    assert_eq!(taps[0].shape(), &[16, 2, 2]);
    assert_ne!(taps[0], taps[1]);
}

#[test]
fn zero_discriminator_outputs_one_half() {
    let mut d: Discriminator = Discriminator::new(&cfg(), &mut rng(4)).unwrap();
    for t in d.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let logits = d.logits(&images(5, 2, 16)).unwrap();
    assert_eq!(logits.shape(), &[2, 1, 4, 4]);
    let mut g = Graph::<f32>::new();
    let l = g.constant(logits);
    let p = g.sigmoid(l);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    assert!(d.logits(&images(5, 1, 18)).is_err());
}

#[test]
fn classifier_outputs() {
    let c: Classifier = Classifier::new(&cfg(), 4, &mut rng(6)).unwrap();
    assert_eq!((c.n_classes(), c.feature_dim()), (4, 6));
    let (logits, feats) = c.evaluate(&images(7, 5, 16)).unwrap();
    assert_eq!(logits.shape(), &[5, 4]);
    assert_eq!(feats.shape(), &[5, 6]);
    assert_eq!(c.predict(&images(7, 5, 16)).unwrap(), argmax_rows(&logits));
    assert!(Classifier::<f32>::new(&cfg(), 1, &mut rng(6)).is_err());
}

#[test]
fn argmax_breaks_ties_low() {
    let t = Tensor::<f32>::from_fn(&[2, 3], |k| [1.0, 3.0, 3.0, 0.5, 0.5, 0.5][k]);
    assert_eq!(argmax_rows(&t), vec![1, 0]);
}

#[test]
fn projection_rows_are_unit_length() {
    let g: Generator = Generator::new(&cfg(), &mut rng(8)).unwrap();
    let heads: MlpHeads = MlpHeads::new(&g.tap_channels(), 8, &mut rng(9)).unwrap();
    let img = images(10, 1, 16).reshape(&[3, 16, 16]).unwrap();
    let stack = g.encoder_features(&img, &[0, 1, 2, 3, 4]).unwrap();
    let locs = vec![vec![0, 5, 255], vec![1, 2], vec![3], vec![0, 15], vec![7]];
    let out = heads.mlp_project(&stack, &locs).unwrap();
    for (o, l) in out.iter().zip(&locs) {
        assert_eq!(o.shape(), &[l.len(), 8]);
        for row in o.data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            // An all-zero post-ReLU feature row embeds to the zero vector.
            assert!((n - 1.0).abs() < 1e-5 || n == 0.0, "{n}");
        }
    }
    assert!(out.iter().flat_map(|o| o.data().chunks(8)).any(|r| r.iter().any(|&v| v != 0.0)));
    let bad = vec![vec![256], vec![0], vec![0], vec![0], vec![0]];
    assert!(heads.mlp_project(&stack, &bad).is_err());
}

#[test]
fn invalid_model_configs() {
    for bad in [
        ModelConfig { res_blocks: 1, ..cfg() },
        ModelConfig { res_blocks: 0, ..cfg() },
        ModelConfig { gen_channels: 0, ..cfg() },
        ModelConfig { feature_dim: 1, ..cfg() },
    ] {
        assert!(bad.validate().is_err());
        assert!(Generator::<f32>::new(&bad, &mut rng(1)).is_err());
    }
}

/// `Σ w ⊙ out` with fixed random weights, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let w = uniform(&mut rng(seed), g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn wrap<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

const NET_TOL: f64 = 1e-3;

#[test]
fn generator_input_gradients_match_finite_differences() {
    let g: Generator<f64> = Generator::new(&cfg(), &mut rng(11)).unwrap();
    let x = uniform(&mut rng(12), &[1, 3, 8, 8], -1.0, 1.0);
    let err = grad_check_many(
        |gr, v| {
            let b = g.params.bind(gr, false);
            let out = g.forward(gr, &b, v[0]).map_err(wrap)?;
            weighted_sum(gr, out, 13)
        },
        &[x],
        1e-6,
        Some(48),
    )
    .unwrap();
    assert!(err < NET_TOL, "{err}");
}

#[test]
fn discriminator_and_classifier_gradients_match_finite_differences() {
    let d: Discriminator<f64> = Discriminator::new(&cfg(), &mut rng(14)).unwrap();
    let c: Classifier<f64> = Classifier::new(&cfg(), 3, &mut rng(15)).unwrap();
    let x = uniform(&mut rng(16), &[2, 3, 8, 8], -1.0, 1.0);
    let err = grad_check_many(
        |gr, v| {
            let b = d.params.bind(gr, false);
            let out = d.forward(gr, &b, v[0]).map_err(wrap)?;
            weighted_sum(gr, out, 17)
        },
        std::slice::from_ref(&x),
        1e-6,
        Some(48),
    )
    .unwrap();
    assert!(err < NET_TOL, "discriminator {err}");
    let err = grad_check_many(
        |gr, v| {
            let b = c.params.bind(gr, false);
            let pass = c.forward(gr, &b, v[0]).map_err(wrap)?;
            weighted_sum(gr, pass.logits, 18)
        },
        &[x],
        1e-6,
        Some(48),
    )
    .unwrap();
    assert!(err < NET_TOL, "classifier {err}");
}

#[test]
fn projection_head_gradients_match_finite_differences() {
    let heads: MlpHeads<f64> = MlpHeads::new(&[5], 4, &mut rng(19)).unwrap();
    let rows = uniform(&mut rng(20), &[6, 5], -1.0, 1.0);
    let err = grad_check_many(
        |gr, v| {
            let b = heads.params.bind(gr, false);
            let out = heads.project(gr, &b, 0, v[0]).map_err(wrap)?;
            weighted_sum(gr, out, 21)
        },
        &[rows],
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < NET_TOL, "{err}");
}
