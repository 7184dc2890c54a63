//! Finite-difference checks of every loss, on top of the primitive suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttl_tensor::suite::{primitive_suite, uniform, GradCheckEntry, SUITE_EPS};
use ttl_tensor::{grad_check_many, Graph, Tensor, Var};

use crate::contrastive::{
    augment_negatives, monce, monce_plan, patchnce, ContrastiveConfig, NfmConfig, PatchBatch, TransportPlan,
};
use crate::error::Result;
use crate::objectives::{cross_entropy, cycle_loss, gan_value, generator_adversarial, identity_loss};

/// Largest relative error accepted by the suite.
pub const GRAD_TOL: f64 = 1e-4;

const N: usize = 6;
const E: usize = 8;

fn batch(g: &mut Graph<f64>, x: &[Var]) -> Result<PatchBatch> {
    let q = g.l2_normalize_rows(x[0])?;
    let k = g.l2_normalize_rows(x[1])?;
    PatchBatch::new(g, q, k, 0, (0..N).collect())
}

fn nfm_batch(g: &mut Graph<f64>, x: &[Var], seed: u64) -> Result<PatchBatch> {
    let b = batch(g, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_negatives(g, b, &NfmConfig::default(), &mut rng)
}

/// Plan at the unperturbed point, held fixed while probing.
fn frozen_plan(points: &[Tensor<f64>], cfg: &ContrastiveConfig, nfm_seed: Option<u64>) -> Result<TransportPlan> {
    let mut g = Graph::new();
    let x: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let b = match nfm_seed {
        Some(s) => nfm_batch(&mut g, &x, s)?,
        None => batch(&mut g, &x)?,
    };
    monce_plan(&mut g, &b, cfg)
}

fn check<F>(name: &str, points: &[Tensor<f64>], f: F) -> Result<GradCheckEntry>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let err = grad_check_many(
        |g, x| f(g, x).map_err(|e| ttl_tensor::TensorError::InvalidArgument(e.to_string())),
        points,
        SUITE_EPS,
        None,
    )?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: err,
    })
}

/// Gradient-check every loss on random inputs drawn from `seed`.
pub fn loss_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ContrastiveConfig::default();
    let mut out = Vec::new();

    let qk = vec![uniform(&mut rng, &[N, E], -1.0, 1.0), uniform(&mut rng, &[N, E], -1.0, 1.0)];
    out.push(check("patchnce", &qk, |g, x| {
        let b = batch(g, x)?;
        patchnce(g, &b, cfg.tau)
    })?);

    let plan = frozen_plan(&qk, &cfg, None)?;
    out.push(check("monce", &qk, |g, x| {
        let b = batch(g, x)?;
        monce(g, &b, &plan, &cfg)
    })?);

    let nfm_seed = seed ^ 0x4e46;
    out.push(check("nfm-patchnce", &qk, |g, x| {
        let b = nfm_batch(g, x, nfm_seed)?;
        patchnce(g, &b, cfg.tau)
    })?);
    let nfm_plan = frozen_plan(&qk, &cfg, Some(nfm_seed))?;
    out.push(check("nfm-monce", &qk, |g, x| {
        let b = nfm_batch(g, x, nfm_seed)?;
        monce(g, &b, &nfm_plan, &cfg)
    })?);

    let probs = vec![
        uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95),
        uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95),
    ];
    out.push(check("gan-value", &probs, |g, x| gan_value(g, x[0], x[1]))?);
    out.push(check("generator-adversarial", &probs[1..], |g, x| generator_adversarial(g, x[0]))?);

    let imgs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)).collect();
    out.push(check("cycle", &imgs, |g, x| cycle_loss(g, x[0], x[1], x[2], x[3]))?);
    out.push(check("identity", &imgs, |g, x| identity_loss(g, x[0], x[1], x[2], x[3]))?);

    let logits = vec![uniform(&mut rng, &[5, 4], -2.0, 2.0)];
    out.push(check("cross-entropy", &logits, |g, x| cross_entropy(g, x[0], &[0, 3, 1, 1, 2]))?);
    Ok(out)
}

/// Primitive suite followed by the loss suite.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut all = primitive_suite(seed)?;
    all.extend(loss_suite(seed)?);
    Ok(all)
}

pub fn all_pass(entries: &[GradCheckEntry]) -> bool {
    entries.iter().all(|e| e.max_rel_error < GRAD_TOL)
}
