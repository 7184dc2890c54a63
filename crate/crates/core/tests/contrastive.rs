use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttl_core::contrastive::*;
use ttl_tensor::{Graph, Tensor};

fn unit_rows(rng: &mut impl Rng, n: usize, e: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let e = rows[0].len();
    Tensor::from_fn(&[rows.len(), e], |k| rows[k / e][k % e])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn batch(g: &mut Graph<f64>, q: &[Vec<f64>], k: &[Vec<f64>]) -> PatchBatch {
    let qv = g.constant(tensor(q));
    let kv = g.constant(tensor(k));
    PatchBatch::new(g, qv, kv, 0, (0..q.len()).collect()).unwrap()
}

/// Plain alternating row/column normalization with masked diagonal.
fn sinkhorn_oracle(cost: &[Vec<f64>], eps: f64, iters: usize) -> Vec<Vec<f64>> {
    let n = cost.len();
    let mut p: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { (-cost[i][j] / eps).exp() })
                .collect()
        })
        .collect();
    for _ in 0..iters {
        for row in p.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| p[i][j]).sum();
            (0..n).for_each(|i| p[i][j] /= s);
        }
    }
    for row in p.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

#[test]
fn sample_patches_exhaustive_covers_every_location_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let locs = sample_patches(&[16, 16], 16, PatchSelector::Random(&mut rng)).unwrap();
    for l in locs {
        let mut s = l.clone();
        s.sort_unstable();
        assert_eq!(s, (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn sample_patches_is_seeded_and_distinct() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_patches(&[64, 256], 20, PatchSelector::Random(&mut rng)).unwrap()
    };
    assert_eq!(draw(3), draw(3));
    for l in draw(3) {
        let mut s = l.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
    }
}

#[test]
fn sample_patches_indices_pass_through() {
    let lists = vec![vec![3, 1, 2], vec![0, 7, 5]];
    assert_eq!(sample_patches(&[4, 8], 3, PatchSelector::Indices(&lists)).unwrap(), lists);
    let repeated = vec![vec![1, 1, 2], vec![0, 7, 5]];
    assert!(sample_patches(&[4, 8], 3, PatchSelector::Indices(&repeated)).is_err());
    let out_of_range = vec![vec![1, 9, 2], vec![0, 7, 5]];
    assert!(sample_patches(&[4, 8], 3, PatchSelector::Indices(&out_of_range)).is_err());
}

#[test]
fn sample_patches_rejects_too_many() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(sample_patches(&[64, 16], 17, PatchSelector::Random(&mut rng)).is_err());
}

#[test]
fn hardness_weights_cases() {
    let w = hardness_weights(&DMatrix::from_element(4, 4, 0.3), 1.0).unwrap();
    assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-12));

    let sim = DMatrix::from_row_slice(2, 3, &[0.1, 0.9, 0.2, 0.5, 0.4, -0.3]);
    let sharp = hardness_weights(&sim, 1e-3).unwrap();
    assert!((sharp[(0, 1)] - 1.0).abs() < 1e-9);
    assert!((sharp[(1, 0)] - 1.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sim = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    let w = hardness_weights(&sim, 1.0).unwrap();
    for i in 0..4 {
        let z: f64 = (0..4).map(|j| sim[(i, j)].exp()).sum();
        for j in 0..4 {
            assert!((w[(i, j)] - sim[(i, j)].exp() / z).abs() < 1e-6);
        }
    }
    assert!(hardness_weights(&sim, 0.0).is_err());
}

proptest! {
    #[test]
    fn hardness_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12), beta in 0.01f64..10.0) {
        let w = hardness_weights(&DMatrix::from_row_slice(3, 4, &vals), beta).unwrap();
        for r in w.row_iter() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn sinkhorn_three_by_three_uniform() {
    let cost = DMatrix::from_fn(3, 3, |i, j| if i == j { f64::INFINITY } else { 1.0 });
    let plan = sinkhorn_plan(&cost, &ContrastiveConfig::default()).unwrap();
    assert!(plan.converged);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 0.0 } else { 0.5 };
            assert!((plan.weights[(i, j)] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn sinkhorn_matches_alternating_normalization_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ContrastiveConfig {
        ot_max_iter: 10_000,
        ot_tol: 1e-10,
        ..ContrastiveConfig::default()
    };
    for _ in 0..5 {
        let raw: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let cost = DMatrix::from_fn(8, 8, |i, j| raw[i][j]);
        let plan = sinkhorn_plan(&cost, &cfg).unwrap();
        assert!(plan.converged);
        let oracle = sinkhorn_oracle(&raw, cfg.ot_epsilon, 10_000);
        for i in 0..8 {
            let row: f64 = plan.weights.row(i).sum();
            let col: f64 = plan.weights.column(i).sum();
            assert!((row - 1.0).abs() < 1e-6 && (col - 1.0).abs() < 1e-6);
            assert_eq!(plan.weights[(i, i)], 0.0);
            for j in 0..8 {
                assert!((plan.weights[(i, j)] - oracle[i][j]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn sinkhorn_permutation_limit() {
    let perm = [2usize, 0, 3, 1];
    let cost = DMatrix::from_fn(4, 4, |i, j| if j == perm[i] { 0.0 } else { 1.0 });
    let cfg = ContrastiveConfig {
        ot_epsilon: 0.01,
        ot_max_iter: 2000,
        ..ContrastiveConfig::default()
    };
    let plan = sinkhorn_plan(&cost, &cfg).unwrap();
    for i in 0..4 {
        assert!((plan.weights[(i, perm[i])] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn sinkhorn_log_domain_path_keeps_marginals() {
    // Spread of 1000/ε forces the log-domain iterations.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cost = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..40.0));
    let cfg = ContrastiveConfig {
        ot_epsilon: 0.04,
        ot_max_iter: 5000,
        ..ContrastiveConfig::default()
    };
    let plan = sinkhorn_plan(&cost, &cfg).unwrap();
    assert!(plan.weights.iter().all(|v| v.is_finite() && *v >= 0.0));
    let (r, _) = plan.marginal_error();
    assert!(r < 1e-9);
    if plan.converged {
        assert!(plan.marginal_error().1 < 1e-6);
    }
}

#[test]
fn sinkhorn_rectangular_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cost = DMatrix::from_fn(4, 7, |_, _| rng.random_range(0.0..1.0));
    let plan = sinkhorn_plan(&cost, &ContrastiveConfig::default()).unwrap();
    assert!(plan.converged);
    for j in 0..7 {
        assert!((plan.weights.column(j).sum() - 4.0 / 7.0).abs() < 1e-6);
    }
}

#[test]
fn sinkhorn_rejects_degenerate_costs() {
    let cfg = ContrastiveConfig::default();
    assert!(sinkhorn_plan(&DMatrix::from_element(1, 1, 0.0), &cfg).is_err());
    let masked_row = DMatrix::from_fn(3, 3, |i, _| if i == 1 { f64::INFINITY } else { 0.5 });
    assert!(sinkhorn_plan(&masked_row, &cfg).is_err());
}

#[test]
fn sinkhorn_reports_non_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cost = DMatrix::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0));
    let cfg = ContrastiveConfig {
        ot_max_iter: 1,
        ..ContrastiveConfig::default()
    };
    let plan = sinkhorn_plan(&cost, &cfg).unwrap();
    assert!(!plan.converged);
    assert_eq!(plan.weights.shape(), (16, 16));
}

#[test]
fn patchnce_symmetric_batch_is_ln_n() {
    let mut g = Graph::<f64>::new();
    let rows = vec![vec![1.0, 0.0]; 5];
    let b = batch(&mut g, &rows, &rows);
    let l = patchnce(&mut g, &b, 0.07).unwrap();
    assert!((g.scalar_value(l) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn patchnce_two_patch_closed_form() {
    let mut g = Graph::<f64>::new();
    let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let b = batch(&mut g, &q, &q);
    let l = patchnce(&mut g, &b, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((g.scalar_value(l) - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
    assert!((g.scalar_value(l) - 0.31326).abs() < 1e-5);
}

#[test]
fn patchnce_saturates_to_zero() {
    let mut g = Graph::<f64>::new();
    let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let b = batch(&mut g, &q, &q);
    let l = patchnce(&mut g, &b, 1e-3).unwrap();
    assert!(g.scalar_value(l) < 1e-12);
}

#[test]
fn patchnce_rejects_bad_inputs() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(tensor(&[vec![1.0, 0.0]]));
    assert!(PatchBatch::new(&g, one, one, 0, vec![0]).is_err());
    let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let b = batch(&mut g, &q, &q);
    assert!(patchnce(&mut g, &b, 0.0).is_err());
}

#[test]
fn monce_with_uniform_plan_equals_patchnce() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ContrastiveConfig::default();
    for n in [2usize, 4, 8] {
        for _ in 0..20 {
            let q = unit_rows(&mut rng, n, 6);
            let k = unit_rows(&mut rng, n, 6);
            let mut g = Graph::<f64>::new();
            let b = batch(&mut g, &q, &k);
            let a = patchnce(&mut g, &b, cfg.tau).unwrap();
            let m = monce(&mut g, &b, &TransportPlan::uniform(n, n), &cfg).unwrap();
            assert!((g.scalar_value(a) - g.scalar_value(m)).abs() < 1e-6);
        }
    }
}

#[test]
fn monce_with_zero_q_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ContrastiveConfig {
        q: 0.0,
        ..ContrastiveConfig::default()
    };
    let q = unit_rows(&mut rng, 5, 4);
    let k = unit_rows(&mut rng, 5, 4);
    let mut g = Graph::<f64>::new();
    let b = batch(&mut g, &q, &k);
    let plan = monce_plan(&mut g, &b, &cfg).unwrap();
    let l = monce(&mut g, &b, &plan, &cfg).unwrap();
    assert!(g.scalar_value(l).abs() < 1e-12);
}

#[test]
fn monce_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 4;
    for mode in [WeightingMode::Hard, WeightingMode::Easy] {
        let cfg = ContrastiveConfig {
            weighting_mode: mode,
            ot_max_iter: 10_000,
            ot_tol: 1e-10,
            ..ContrastiveConfig::default()
        };
        let q = unit_rows(&mut rng, n, 5);
        let k = unit_rows(&mut rng, n, 5);
        let mut g = Graph::<f64>::new();
        let b = batch(&mut g, &q, &k);
        let plan = monce_plan(&mut g, &b, &cfg).unwrap();
        let l = monce(&mut g, &b, &plan, &cfg).unwrap();

        let sign = if mode == WeightingMode::Hard { -1.0 } else { 1.0 };
        let sim: Vec<Vec<f64>> = q.iter().map(|qi| k.iter().map(|kj| dot(qi, kj)).collect()).collect();
        let cost: Vec<Vec<f64>> = sim
            .iter()
            .map(|r| r.iter().map(|s| (sign * s / cfg.beta_w).exp()).collect())
            .collect();
        let w = sinkhorn_oracle(&cost, cfg.ot_epsilon, 10_000);
        let mut want = 0.0;
        for i in 0..n {
            let pos = (sim[i][i] / cfg.tau).exp();
            let neg: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| w[i][j] * (sim[i][j] / cfg.tau).exp())
                .sum();
            want -= (pos / (pos + cfg.q * (n - 1) as f64 * neg)).ln();
        }
        want /= n as f64;
        assert!((g.scalar_value(l) - want).abs() < 1e-5, "{mode:?}");
    }
}

#[test]
fn monce_rejects_mismatched_plan() {
    let mut g = Graph::<f64>::new();
    let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    let b = batch(&mut g, &q, &q);
    assert!(monce(&mut g, &b, &TransportPlan::uniform(4, 4), &ContrastiveConfig::default()).is_err());
}

#[test]
fn nfm_without_noise_is_manifold_mixup() {
    let cfg = NfmConfig {
        sigma_add: 0.0,
        sigma_mult: 0.0,
        ..NfmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let draw = NfmDraw::sample(6, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let out = nfm_mix_with(&g1, &g2, &cfg, &draw).unwrap();
    for e in 0..6 {
        let mix = draw.lambda * g1[e] + (1.0 - draw.lambda) * g2[e];
        assert!((out[e] - mix).abs() < 1e-7);
    }
    let keep = NfmDraw {
        lambda: 1.0,
        ..draw
    };
    assert_eq!(nfm_mix_with(&g1, &g2, &cfg, &keep).unwrap(), g1);
}

#[test]
fn nfm_scalar_hand_evaluation() {
    let cfg = NfmConfig::default();
    let draw = NfmDraw::sample(1, &cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let out = nfm_mix(&[1.0], &[0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let want = (1.0 + 0.1 * draw.xi_mult[0]) * draw.lambda + 0.1 * draw.xi_add[0];
    assert!((out[0] - want).abs() < 1e-15);
    assert!(nfm_mix(&[1.0, 2.0], &[0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn augment_negatives_doubles_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = unit_rows(&mut rng, 8, 5);
    let k = unit_rows(&mut rng, 8, 5);
    let mut g = Graph::<f64>::new();
    let b = batch(&mut g, &q, &k);
    assert_eq!(b.negatives_per_anchor(&g), 7);
    let aug = augment_negatives(&mut g, b, &NfmConfig::default(), &mut rng).unwrap();
    assert_eq!(aug.negatives_per_anchor(&g), 14);
    let syn = aug.synthetic.unwrap();
    assert_eq!(g.shape(syn), &[8, 7, 5]);
    for row in g.value(syn).data().chunks(5) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    let s = aug.similarities(&mut g).unwrap();
    assert_eq!(g.shape(s), &[8, 15]);
}

#[test]
fn augment_negatives_disabled_and_small_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let off = NfmConfig {
        enabled: false,
        ..NfmConfig::default()
    };
    let mut g = Graph::<f64>::new();
    let q = unit_rows(&mut rng, 4, 3);
    let b = batch(&mut g, &q, &q);
    let same = augment_negatives(&mut g, b.clone(), &off, &mut rng).unwrap();
    assert!(same.synthetic.is_none());
    assert_eq!(same.keys, b.keys);

    let two = unit_rows(&mut rng, 2, 3);
    let b2 = batch(&mut g, &two, &two);
    assert!(augment_negatives(&mut g, b2, &NfmConfig::default(), &mut rng).is_err());
}

#[test]
fn augmented_synthetics_mix_the_anchors_own_negatives() {
    // Zero noise and distinct one-hot keys: each synthetic row lies in the
    // span of two keys other than the anchor's positive.
    let cfg = NfmConfig {
        sigma_add: 0.0,
        sigma_mult: 0.0,
        ..NfmConfig::default()
    };
    let n = 5;
    let keys: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut g = Graph::<f64>::new();
    let b = batch(&mut g, &keys, &keys);
    let aug = augment_negatives(&mut g, b, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let syn = g.value(aug.synthetic.unwrap()).clone();
    for i in 0..n {
        for m in 0..n - 1 {
            let row = &syn.data()[(i * (n - 1) + m) * n..(i * (n - 1) + m + 1) * n];
            assert!(row[i].abs() < 1e-12, "anchor {i} leaked its positive");
            assert!(row.iter().filter(|v| v.abs() > 1e-12).count() <= 2);
        }
    }
}

#[test]
fn monce_over_augmented_batch_uses_rectangular_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = ContrastiveConfig::default();
    let q = unit_rows(&mut rng, 6, 4);
    let k = unit_rows(&mut rng, 6, 4);
    let mut g = Graph::<f64>::new();
    let b = batch(&mut g, &q, &k);
    let b = augment_negatives(&mut g, b, &cfg.nfm, &mut rng).unwrap();
    let plan = monce_plan(&mut g, &b, &cfg).unwrap();
    assert_eq!(plan.weights.shape(), (6, 11));
    let l = monce(&mut g, &b, &plan, &cfg).unwrap();
    assert!(g.scalar_value(l).is_finite());
    let p = patchnce(&mut g, &b, cfg.tau).unwrap();
    let u = monce(&mut g, &b, &TransportPlan::uniform(6, 11), &cfg).unwrap();
    assert!((g.scalar_value(p) - g.scalar_value(u)).abs() < 1e-9);
}

proptest! {
    #[test]
    fn derangement_has_no_fixed_points(n in 2usize..40, seed in any::<u64>()) {
        let p = derangement(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut s = p.clone();
        s.sort_unstable();
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
    }

    #[test]
    fn patchnce_is_nonnegative(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit_rows(&mut rng, n, 3);
        let k = unit_rows(&mut rng, n, 3);
        let mut g = Graph::<f64>::new();
        let b = batch(&mut g, &q, &k);
        let l = patchnce(&mut g, &b, 0.1).unwrap();
        prop_assert!(g.scalar_value(l) >= 0.0);
    }

    #[test]
    fn converged_plans_meet_marginals(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..2.0));
        let plan = sinkhorn_plan(&cost, &ContrastiveConfig::default()).unwrap();
        if plan.converged {
            let (r, c) = plan.marginal_error();
            prop_assert!(r < 1e-6 && c < 1e-6);
        }
        for i in 0..n {
            prop_assert_eq!(plan.weights[(i, i)], 0.0);
        }
    }
}

