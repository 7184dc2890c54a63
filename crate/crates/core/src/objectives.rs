//! Adversarial, cycle, identity and cross-entropy losses and their weighted
//! aggregates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use ttl_tensor::{Graph, Real, Var};

use crate::error::{invalid, Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-6;

/// A named part of a total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Gan,
    Cycle,
    Identity,
    Nce1,
    Nce2,
    Nce3,
    Nce4,
    CeSource,
    CeTarget,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::Gan,
        Term::Cycle,
        Term::Identity,
        Term::Nce1,
        Term::Nce2,
        Term::Nce3,
        Term::Nce4,
        Term::CeSource,
        Term::CeTarget,
    ];

    pub const NCE: [Term; 4] = [Term::Nce1, Term::Nce2, Term::Nce3, Term::Nce4];

    pub fn name(self) -> &'static str {
        match self {
            Term::Gan => "gan",
            Term::Cycle => "cycle",
            Term::Identity => "identity",
            Term::Nce1 => "nce1",
            Term::Nce2 => "nce2",
            Term::Nce3 => "nce3",
            Term::Nce4 => "nce4",
            Term::CeSource => "ce_src",
            Term::CeTarget => "ce_tgt",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which aggregate a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CycleGan,
    CycleGanTtl,
    C3ttl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lambda_4: f64,
    pub lambda_5: f64,
    pub lambda_6: f64,
    pub lambda_7: f64,
    pub lambda_ce_warm: f64,
    pub lambda_ce_main: f64,
    pub warm_epochs: usize,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_b: 10.0,
            lambda_c: 5.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 1.0,
            lambda_4: 1.0,
            lambda_5: 1.0,
            lambda_6: 10.0,
            lambda_7: 5.0,
            lambda_ce_warm: 0.5,
            lambda_ce_main: 2.5,
            warm_epochs: 10,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_a,
            self.lambda_b,
            self.lambda_c,
            self.lambda_1,
            self.lambda_2,
            self.lambda_3,
            self.lambda_4,
            self.lambda_5,
            self.lambda_6,
            self.lambda_7,
            self.lambda_ce_warm,
            self.lambda_ce_main,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("objective weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn lambda_ce(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs {
            self.lambda_ce_warm
        } else {
            self.lambda_ce_main
        }
    }

    /// Coefficient of every term of `objective` at `epoch`.
    pub fn coefficients(&self, objective: Objective, epoch: usize) -> Vec<(Term, f64)> {
        let ce = self.lambda_ce(epoch);
        match objective {
            Objective::CycleGan => vec![
                (Term::Gan, self.lambda_a),
                (Term::Cycle, self.lambda_b),
                (Term::Identity, self.lambda_c),
            ],
            Objective::CycleGanTtl => vec![
                (Term::Gan, self.lambda_a),
                (Term::Cycle, self.lambda_b),
                (Term::Identity, self.lambda_c),
                (Term::CeSource, ce),
                (Term::CeTarget, ce),
            ],
            Objective::C3ttl => vec![
                (Term::Gan, self.lambda_1),
                (Term::Nce1, self.lambda_2),
                (Term::Nce2, self.lambda_3),
                (Term::Nce3, self.lambda_4),
                (Term::Nce4, self.lambda_5),
                (Term::Cycle, self.lambda_6),
                (Term::Identity, self.lambda_7),
                (Term::CeSource, ce),
                (Term::CeTarget, ce),
            ],
        }
    }
}

/// Loss parts of one iteration (or an epoch mean) and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub iteration: usize,
    pub objective: Objective,
    pub parts: BTreeMap<Term, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn new(epoch: usize, iteration: usize, objective: Objective) -> Self {
        Self {
            epoch,
            iteration,
            objective,
            parts: BTreeMap::new(),
            total: 0.0,
        }
    }

    pub fn with(mut self, term: Term, value: f64) -> Self {
        self.parts.insert(term, value);
        self
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.parts.get(&term).copied()
    }

    /// Weighted sum over the parts present; absent terms contribute nothing.
    pub fn recompute(&self, w: &ObjectiveWeights) -> f64 {
        w.coefficients(self.objective, self.epoch)
            .into_iter()
            .filter_map(|(t, c)| self.get(t).map(|v| c * v))
            .sum()
    }
}

/// `Σ c·part` over `coeffs`; every listed term must be present.
pub fn weighted_total(parts: &LossReport, coeffs: &[(Term, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for &(t, c) in coeffs {
        let v = parts.get(t).ok_or_else(|| Error::MissingPart(t.name().into()))?;
        total += c * v;
    }
    Ok(total)
}

pub fn cyclegan_total(parts: &LossReport, w: &ObjectiveWeights) -> Result<f64> {
    weighted_total(parts, &w.coefficients(Objective::CycleGan, 0))
}

pub fn cyclegan_ttl_total(parts: &LossReport, w: &ObjectiveWeights, epoch: usize) -> Result<f64> {
    weighted_total(parts, &w.coefficients(Objective::CycleGanTtl, epoch))
}

pub fn c3ttl_total(parts: &LossReport, w: &ObjectiveWeights, epoch: usize) -> Result<f64> {
    weighted_total(parts, &w.coefficients(Objective::C3ttl, epoch))
}

/// Graph form of [`weighted_total`] over the parts that are present.
pub fn weighted_total_graph<T: Real>(
    g: &mut Graph<T>,
    parts: &BTreeMap<Term, Var>,
    coeffs: &[(Term, f64)],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(t, c) in coeffs {
        let Some(&v) = parts.get(&t) else { continue };
        let term = g.scale(v, c);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| invalid("no loss parts to aggregate"))
}

fn mean_log<T: Real>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let c = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let l = g.log(c)?;
    Ok(g.mean(l)?)
}

fn nonempty<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    Ok(())
}

/// `mean log D(real) + mean log(1 - D(fake))` on probability maps.
pub fn gan_value<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    nonempty(g, d_real, "d_real")?;
    nonempty(g, d_fake, "d_fake")?;
    let a = mean_log(g, d_real)?;
    let neg = g.scale(d_fake, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let b = mean_log(g, one_minus)?;
    Ok(g.add(a, b)?)
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_adversarial<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    nonempty(g, d_fake, "d_fake")?;
    let m = mean_log(g, d_fake)?;
    Ok(g.scale(m, -1.0))
}

fn mean_l1<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d)?)
}

/// `mean|x_cyc - x| + mean|y_cyc - y|`.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, x: Var, x_cyc: Var, y: Var, y_cyc: Var) -> Result<Var> {
    let a = mean_l1(g, x_cyc, x)?;
    let b = mean_l1(g, y_cyc, y)?;
    Ok(g.add(a, b)?)
}

/// `mean|G_XY(y) - y| + mean|G_YX(x) - x|`.
pub fn identity_loss<T: Real>(g: &mut Graph<T>, g_xy_of_y: Var, y: Var, g_yx_of_x: Var, x: Var) -> Result<Var> {
    let a = mean_l1(g, g_xy_of_y, y)?;
    let b = mean_l1(g, g_yx_of_x, x)?;
    Ok(g.add(a, b)?)
}

/// Mean of `-log softmax(logits_r)[label_r]`; `logits` is `[C]` or `[B,C]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let logits = match shape.as_slice() {
        [c] => g.reshape(logits, &[1, *c])?,
        [_, _] => logits,
        s => return Err(invalid(format!("cross_entropy expects [C] or [B,C] logits, got {s:?}"))),
    };
    let (b, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != b {
        return Err(invalid(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    let lsm = g.log_softmax_rows(logits)?;
    let picked = g.pick_cols(lsm, labels)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0))
}
