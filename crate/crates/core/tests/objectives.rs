use std::collections::BTreeMap;

use proptest::prelude::*;
use ttl_core::objectives::*;
use ttl_core::Error;
use ttl_tensor::{Graph, Tensor};

fn unit_parts(objective: Objective, epoch: usize) -> LossReport {
    Term::ALL
        .iter()
        .fold(LossReport::new(epoch, 0, objective), |r, &t| r.with(t, 1.0))
}

fn probs(g: &mut Graph<f64>, v: &[f64]) -> ttl_tensor::Var {
    g.constant(Tensor::from_fn(&[1, 1, 1, v.len()], |k| v[k]))
}

#[test]
fn gan_value_examples() {
    let mut g = Graph::<f64>::new();
    let r = probs(&mut g, &[0.5, 0.5]);
    let f = probs(&mut g, &[0.5, 0.5]);
    let v = gan_value(&mut g, r, f).unwrap();
    assert!((g.scalar_value(v) - 2.0 * 0.5f64.ln()).abs() < 1e-12);

    let r = probs(&mut g, &[0.9, 0.6]);
    let f = probs(&mut g, &[0.2, 0.3]);
    let v = gan_value(&mut g, r, f).unwrap();
    let want = (0.9f64.ln() + 0.6f64.ln()) / 2.0 + (0.8f64.ln() + 0.7f64.ln()) / 2.0;
    assert!((g.scalar_value(v) - want).abs() < 1e-12);

    let ga = generator_adversarial(&mut g, f).unwrap();
    assert!((g.scalar_value(ga) + (0.2f64.ln() + 0.3f64.ln()) / 2.0).abs() < 1e-12);
}

#[test]
fn gan_value_clamps_saturated_probabilities() {
    let mut g = Graph::<f64>::new();
    let r = probs(&mut g, &[0.0, 1.0]);
    let f = probs(&mut g, &[1.0, 0.0]);
    let v = gan_value(&mut g, r, f).unwrap();
    assert!(g.scalar_value(v).is_finite());
    assert!((g.scalar_value(v) - (P_CLAMP.ln() + (1.0 - P_CLAMP).ln())).abs() < 1e-9);
    let empty = g.constant(Tensor::zeros(&[0]));
    assert!(gan_value(&mut g, empty, f).is_err());
}

#[test]
fn cycle_and_identity_are_mean_absolute_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 3, 2, 2], 0.0));
    let x_cyc = g.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
    let y = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |k| k as f64 / 12.0));
    let c = cycle_loss(&mut g, x, x_cyc, y, y).unwrap();
    assert!((g.scalar_value(c) - 1.0).abs() < 1e-12);

    let y_shift = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |k| k as f64 / 12.0 - 0.25));
    let i = identity_loss(&mut g, y_shift, y, x_cyc, x).unwrap();
    assert!((g.scalar_value(i) - 1.25).abs() < 1e-12);
    let small = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
    assert!(cycle_loss(&mut g, x, small, y, y).is_err());
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::<f64>::new();
    let flat = g.constant(Tensor::zeros(&[10]));
    let l = cross_entropy(&mut g, flat, &[3]).unwrap();
    assert!((g.scalar_value(l) - 10f64.ln()).abs() < 1e-12);

    let raw = [[1.0, -0.5, 2.0], [0.3, 0.1, -1.2]];
    let labels = [2, 1];
    let logits = g.constant(Tensor::from_fn(&[2, 3], |k| raw[k / 3][k % 3]));
    let l = cross_entropy(&mut g, logits, &labels).unwrap();
    let want: f64 = raw
        .iter()
        .zip(labels)
        .map(|(r, y)| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[y])
        .sum::<f64>()
        / 2.0;
    assert!((g.scalar_value(l) - want).abs() < 1e-12);

    assert!(cross_entropy(&mut g, logits, &[0]).is_err());
    assert!(cross_entropy(&mut g, logits, &[0, 3]).is_err());
}

#[test]
fn unit_parts_totals() {
    let w = ObjectiveWeights::default();
    assert!((cyclegan_total(&unit_parts(Objective::CycleGan, 0), &w).unwrap() - 16.0).abs() < 1e-6);
    assert!((c3ttl_total(&unit_parts(Objective::C3ttl, 10), &w, 10).unwrap() - 25.0).abs() < 1e-6);
    assert!((c3ttl_total(&unit_parts(Objective::C3ttl, 3), &w, 3).unwrap() - 21.0).abs() < 1e-6);
    assert!((cyclegan_ttl_total(&unit_parts(Objective::CycleGanTtl, 0), &w, 0).unwrap() - 17.0).abs() < 1e-6);
    assert!((cyclegan_ttl_total(&unit_parts(Objective::CycleGanTtl, 10), &w, 10).unwrap() - 21.0).abs() < 1e-6);
    assert_eq!(w.lambda_ce(9), 0.5);
    assert_eq!(w.lambda_ce(10), 2.5);
}

#[test]
fn totals_require_every_part() {
    let w = ObjectiveWeights::default();
    let mut r = unit_parts(Objective::C3ttl, 12);
    r.parts.remove(&Term::Nce3);
    assert!(matches!(c3ttl_total(&r, &w, 12), Err(Error::MissingPart(p)) if p == "nce3"));
    assert!((r.recompute(&w) - 24.0).abs() < 1e-12);
    assert!(cyclegan_total(&r, &w).is_ok());
}

#[test]
fn graph_total_matches_scalar_total() {
    let w = ObjectiveWeights::default();
    let mut g = Graph::<f64>::new();
    let mut vars = BTreeMap::new();
    let mut report = LossReport::new(11, 0, Objective::C3ttl);
    for (k, t) in Term::ALL.iter().enumerate() {
        let v = 0.3 + k as f64;
        vars.insert(*t, g.constant(Tensor::scalar(v)));
        report = report.with(*t, v);
    }
    let coeffs = w.coefficients(Objective::C3ttl, 11);
    let total = weighted_total_graph(&mut g, &vars, &coeffs).unwrap();
    assert!((g.scalar_value(total) - c3ttl_total(&report, &w, 11).unwrap()).abs() < 1e-12);
    assert!(weighted_total_graph(&mut g, &BTreeMap::new(), &coeffs).is_err());
}

#[test]
fn negative_weights_are_rejected() {
    let w = ObjectiveWeights {
        lambda_6: -1.0,
        ..ObjectiveWeights::default()
    };
    assert!(w.validate().is_err());
    assert!(ObjectiveWeights::default().validate().is_ok());
}

proptest! {
    #[test]
    fn totals_are_linear_in_parts(vals in prop::collection::vec(0.0f64..10.0, 9), a in 0.0f64..5.0, epoch in 0usize..30) {
        let w = ObjectiveWeights::default();
        let build = |s: f64| Term::ALL
            .iter()
            .zip(&vals)
            .fold(LossReport::new(epoch, 0, Objective::C3ttl), |r, (&t, &v)| r.with(t, s * v));
        let base = c3ttl_total(&build(1.0), &w, epoch).unwrap();
        let scaled = c3ttl_total(&build(a), &w, epoch).unwrap();
        prop_assert!((scaled - a * base).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn cross_entropy_is_nonnegative(raw in prop::collection::vec(-20.0f64..20.0, 8), label in 0usize..4) {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_fn(&[2, 4], |k| raw[k]));
        let l = cross_entropy(&mut g, logits, &[label, 3 - label]).unwrap();
        prop_assert!(g.scalar_value(l) >= 0.0);
    }
}
