//! Patch-level contrastive objectives: sampling, hardness weights, entropic
//! transport plans, PatchNCE, MoNCE and noisy-feature-mixup negatives.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use ttl_tensor::{Graph, Real, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::nets::NORM_FLOOR;

/// Log-weight given to masked logits; `exp` of it underflows to zero.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    /// Cost `exp(-s/β)`: transport mass goes to similar (hard) negatives.
    Hard,
    /// Cost `exp(+s/β)`: transport mass goes to dissimilar negatives.
    Easy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NfmConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_add: f64,
    pub sigma_mult: f64,
    pub enabled: bool,
}

impl Default for NfmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            sigma_add: 0.1,
            sigma_mult: 0.1,
            enabled: true,
        }
    }
}

impl NfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("nfm alpha and beta must be > 0".into()));
        }
        if !(self.sigma_add >= 0.0 && self.sigma_mult >= 0.0) {
            return Err(Error::Config("nfm noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub beta_w: f64,
    /// Weight of the negative terms.
    pub q: f64,
    /// Patches per image.
    pub n_patches: usize,
    pub ot_epsilon: f64,
    pub ot_max_iter: usize,
    pub ot_tol: f64,
    pub weighting_mode: WeightingMode,
    pub nfm: NfmConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            beta_w: 1.0,
            q: 1.0,
            n_patches: 64,
            ot_epsilon: 0.05,
            ot_max_iter: 200,
            ot_tol: 1e-6,
            weighting_mode: WeightingMode::Hard,
            nfm: NfmConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(self.beta_w > 0.0) {
            return Err(Error::Config("beta_w must be > 0".into()));
        }
        if !(self.q >= 0.0) {
            return Err(Error::Config("q must be >= 0".into()));
        }
        if self.n_patches < 2 {
            return Err(Error::Config("n_patches must be >= 2".into()));
        }
        if !(self.ot_epsilon > 0.0) || !(self.ot_tol > 0.0) || self.ot_max_iter == 0 {
            return Err(Error::Config(
                "ot_epsilon, ot_tol and ot_max_iter must be positive".into(),
            ));
        }
        self.nfm.validate()
    }
}

/// How [`sample_patches`] picks locations.
pub enum PatchSelector<'a> {
    Random(&'a mut dyn RngCore),
    /// One list per layer, passed through after validation.
    Indices(&'a [Vec<usize>]),
}

/// Picks `n` distinct locations per layer; `cells[l]` is `H_l·W_l`.
pub fn sample_patches(cells: &[usize], n: usize, selector: PatchSelector<'_>) -> Result<Vec<Vec<usize>>> {
    if let Some(&smallest) = cells.iter().min() {
        if n > smallest {
            return Err(invalid(format!(
                "cannot sample {n} patches from a map with {smallest} cells"
            )));
        }
    }
    match selector {
        PatchSelector::Random(rng) => Ok(cells
            .iter()
            .map(|&c| rand::seq::index::sample(rng, c, n).into_vec())
            .collect()),
        PatchSelector::Indices(lists) => {
            if lists.len() != cells.len() {
                return Err(invalid(format!(
                    "{} index lists for {} layers",
                    lists.len(),
                    cells.len()
                )));
            }
            for (l, (list, &c)) in lists.iter().zip(cells).enumerate() {
                if list.len() != n {
                    return Err(invalid(format!("layer {l}: {} indices, expected {n}", list.len())));
                }
                let mut seen = vec![false; c];
                for &i in list {
                    if i >= c || std::mem::replace(&mut seen[i], true) {
                        return Err(invalid(format!("layer {l}: index {i} out of range or repeated")));
                    }
                }
            }
            Ok(lists.to_vec())
        }
    }
}

/// Query/key embeddings for one layer of one image.
///
/// Column `j < N` of the similarity matrix compares query `i` with key `j`
/// (the positive sits at `j = i`). After [`augment_negatives`], columns
/// `N..2N-1` hold each anchor's own synthetic negatives.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[N,E]`
    pub queries: Var,
    /// `[N,E]`
    pub keys: Var,
    /// `[N,N-1,E]`
    pub synthetic: Option<Var>,
    pub layer_id: usize,
    pub locations: Vec<usize>,
}

impl PatchBatch {
    pub fn new<T: Real>(g: &Graph<T>, queries: Var, keys: Var, layer_id: usize, locations: Vec<usize>) -> Result<Self> {
        let (qs, ks) = (g.shape(queries), g.shape(keys));
        if qs.len() != 2 || qs != ks {
            return Err(invalid(format!("queries {qs:?} and keys {ks:?} must both be [N,E]")));
        }
        if qs[0] < 2 {
            return Err(invalid("a patch batch needs N >= 2"));
        }
        Ok(Self {
            queries,
            keys,
            synthetic: None,
            layer_id,
            locations,
        })
    }

    pub fn n<T: Real>(&self, g: &Graph<T>) -> usize {
        g.shape(self.queries)[0]
    }

    pub fn negatives_per_anchor<T: Real>(&self, g: &Graph<T>) -> usize {
        let n = self.n(g);
        if self.synthetic.is_some() {
            2 * (n - 1)
        } else {
            n - 1
        }
    }

    /// Similarity logits before temperature: `[N,N]` or `[N,2N-1]`.
    pub fn similarities<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let kt = g.transpose(self.keys)?;
        let s = g.matmul(self.queries, kt)?;
        match self.synthetic {
            None => Ok(s),
            Some(syn) => {
                let extra = g.rowwise_dot(self.queries, syn)?;
                Ok(g.concat(&[s, extra], 1)?)
            }
        }
    }
}

fn to_matrix<T: Real>(t: &Tensor<T>) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_iterator(r, c, t.data().iter().map(|v| v.as_f64()))
}

fn from_matrix<T: Real>(m: &DMatrix<f64>) -> Tensor<T> {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |k| {
        T::from_f64(m[(k / m.ncols(), k % m.ncols())])
    })
}

/// Row softmax of `sim / beta_w`.
pub fn hardness_weights(sim: &DMatrix<f64>, beta_w: f64) -> Result<DMatrix<f64>> {
    if !(beta_w > 0.0) {
        return Err(invalid(format!("beta_w must be > 0, got {beta_w}")));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(invalid("similarity matrix has non-finite entries"));
    }
    let mut w = sim / beta_w;
    for mut row in w.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(w)
}

/// Entropic transport plan over an `N×M` cost (`M ≥ N`).
///
/// Entry `(i, i)` and every `+∞` entry are masked. Rows carry mass 1 and
/// columns mass `N/M`; the returned plan is rescaled so every row sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub weights: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    /// Every unmasked entry `1/(M-1)`.
    pub fn uniform(n: usize, m: usize) -> Self {
        let mut w = DMatrix::from_element(n, m, 1.0 / (m - 1) as f64);
        for i in 0..n.min(m) {
            w[(i, i)] = 0.0;
        }
        Self {
            weights: w,
            converged: true,
            iterations: 0,
        }
    }

    /// Largest deviation of row sums from 1 and of column sums from `N/M`.
    pub fn marginal_error(&self) -> (f64, f64) {
        marginal_error(&self.weights)
    }
}

fn marginal_error(p: &DMatrix<f64>) -> (f64, f64) {
    let (n, m) = p.shape();
    let b = n as f64 / m as f64;
    let rows = p.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = p.column_iter().map(|c| (c.sum() - b).abs()).fold(0.0, f64::max);
    (rows, cols)
}

fn is_masked(cost: &DMatrix<f64>, i: usize, j: usize) -> bool {
    i == j || cost[(i, j)] == f64::INFINITY
}

/// Sinkhorn iterations on `K = exp(-cost/ε)` with the masked entries zeroed.
///
/// Runs in scaling form with per-row shifted kernels; switches to the
/// log-domain form when the kernel underflows.
pub fn sinkhorn_plan(cost: &DMatrix<f64>, cfg: &ContrastiveConfig) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    if n < 2 || m < n {
        return Err(invalid(format!("transport cost must be N×M with M ≥ N ≥ 2, got {n}×{m}")));
    }
    if !(cfg.ot_epsilon > 0.0) {
        return Err(invalid("ot_epsilon must be > 0"));
    }
    let eps = cfg.ot_epsilon;
    let mut logk = DMatrix::from_element(n, m, f64::NEG_INFINITY);
    let mut col_live = vec![false; m];
    for i in 0..n {
        let mut cmin = f64::INFINITY;
        for j in 0..m {
            if is_masked(cost, i, j) {
                continue;
            }
            let c = cost[(i, j)];
            if c.is_nan() || c == f64::NEG_INFINITY {
                return Err(invalid(format!("transport cost ({i},{j}) is {c}")));
            }
            cmin = cmin.min(c);
            col_live[j] = true;
        }
        if cmin == f64::INFINITY {
            return Err(invalid(format!("transport cost row {i} is fully masked")));
        }
        for j in 0..m {
            if !is_masked(cost, i, j) {
                logk[(i, j)] = -(cost[(i, j)] - cmin) / eps;
            }
        }
    }
    if let Some(j) = col_live.iter().position(|&l| !l) {
        return Err(invalid(format!("transport cost column {j} is fully masked")));
    }
    let underflow = logk.iter().any(|&v| v.is_finite() && v < -700.0);
    let (mut plan, iterations) = if underflow {
        sinkhorn_log(&logk, cfg)
    } else {
        sinkhorn_scaling(&logk, cfg)
    };
    for mut row in plan.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    for i in 0..n {
        plan[(i, i)] = 0.0;
    }
    let (re, ce) = marginal_error(&plan);
    Ok(TransportPlan {
        converged: re < cfg.ot_tol && ce < cfg.ot_tol,
        weights: plan,
        iterations,
    })
}

fn sinkhorn_scaling(logk: &DMatrix<f64>, cfg: &ContrastiveConfig) -> (DMatrix<f64>, usize) {
    let (n, m) = logk.shape();
    // Row-major copy of the kernel; the loops below walk rows.
    let k: Vec<f64> = (0..n * m).map(|p| logk[(p / m, p % m)].exp()).collect();
    let b = n as f64 / m as f64;
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ku = vec![0.0; m];
    let mut iters = 0;
    for it in 1..=cfg.ot_max_iter + 1 {
        for (i, out) in kv.iter_mut().enumerate() {
            *out = k[i * m..(i + 1) * m].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        // Columns match exactly after each v update, so only rows need checking.
        if it > 1 {
            let err = u.iter().zip(&kv).map(|(a, r)| (a * r - 1.0).abs()).fold(0.0, f64::max);
            if err < cfg.ot_tol || it > cfg.ot_max_iter {
                break;
            }
        }
        iters = it;
        for (ui, r) in u.iter_mut().zip(&kv) {
            *ui = 1.0 / r;
        }
        ku.fill(0.0);
        for i in 0..n {
            let ui = u[i];
            for (acc, a) in ku.iter_mut().zip(&k[i * m..(i + 1) * m]) {
                *acc += a * ui;
            }
        }
        for (vj, c) in v.iter_mut().zip(&ku) {
            *vj = b / c;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| u[i] * k[i * m + j] * v[j]);
    (plan, iters)
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn sinkhorn_log(logk: &DMatrix<f64>, cfg: &ContrastiveConfig) -> (DMatrix<f64>, usize) {
    let (n, m) = logk.shape();
    let lb = (n as f64 / m as f64).ln();
    let mut f = vec![0.0; n];
    let mut h = vec![0.0; m];
    let mut iters = 0;
    for it in 1..=cfg.ot_max_iter {
        iters = it;
        for i in 0..n {
            f[i] = -logsumexp((0..m).map(|j| logk[(i, j)] + h[j]));
        }
        for j in 0..m {
            h[j] = lb - logsumexp((0..n).map(|i| logk[(i, j)] + f[i]));
        }
        let err = (0..n)
            .map(|i| {
                let r: f64 = (0..m).map(|j| (logk[(i, j)] + f[i] + h[j]).exp()).sum();
                (r - 1.0).abs()
            })
            .fold(0.0, f64::max);
        if err < cfg.ot_tol {
            break;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| (logk[(i, j)] + f[i] + h[j]).exp());
    (plan, iters)
}

/// Transport cost built from similarities; the positive entries are masked.
pub fn transport_cost(sim: &DMatrix<f64>, beta_w: f64, mode: WeightingMode) -> DMatrix<f64> {
    let sign = match mode {
        WeightingMode::Hard => -1.0,
        WeightingMode::Easy => 1.0,
    };
    DMatrix::from_fn(sim.nrows(), sim.ncols(), |i, j| {
        if i == j {
            f64::INFINITY
        } else {
            (sign * sim[(i, j)] / beta_w).exp()
        }
    })
}

/// Plan for `batch` from its current similarity values (no gradient).
pub fn monce_plan<T: Real>(g: &mut Graph<T>, batch: &PatchBatch, cfg: &ContrastiveConfig) -> Result<TransportPlan> {
    let s = batch.similarities(g)?;
    let sim = to_matrix(g.value(s));
    sinkhorn_plan(&transport_cost(&sim, cfg.beta_w, cfg.weighting_mode), cfg)
}

fn nce_from_logits<T: Real>(g: &mut Graph<T>, logits: Var, n: usize) -> Result<Var> {
    let lsm = g.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.pick_cols(lsm, &diag)?;
    let m = g.mean(pos)?;
    Ok(g.scale(m, -1.0))
}

/// Mean over anchors of `-log softmax(s_i/τ)[i]`.
pub fn patchnce<T: Real>(g: &mut Graph<T>, batch: &PatchBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be > 0, got {tau}")));
    }
    let n = batch.n(g);
    if n < 2 {
        return Err(invalid("patchnce needs N >= 2"));
    }
    let s = batch.similarities(g)?;
    let logits = g.scale(s, 1.0 / tau);
    nce_from_logits(g, logits, n)
}

/// PatchNCE with each negative term scaled by `Q·K·w_ij`, `K` the number of
/// negatives per anchor. The plan enters as a constant.
pub fn monce<T: Real>(g: &mut Graph<T>, batch: &PatchBatch, plan: &TransportPlan, cfg: &ContrastiveConfig) -> Result<Var> {
    if !(cfg.tau > 0.0) || !(cfg.q >= 0.0) {
        return Err(invalid("monce needs tau > 0 and q >= 0"));
    }
    let n = batch.n(g);
    let k = batch.negatives_per_anchor(g);
    let m = n + if batch.synthetic.is_some() { n - 1 } else { 0 };
    if plan.weights.shape() != (n, m) {
        return Err(invalid(format!(
            "plan is {:?}, batch needs {n}×{m}",
            plan.weights.shape()
        )));
    }
    let scale = cfg.q * k as f64;
    let logw = DMatrix::from_fn(n, m, |i, j| {
        let w = plan.weights[(i, j)] * scale;
        if i == j {
            0.0
        } else if w > 0.0 {
            w.ln()
        } else {
            MASKED_LOGIT
        }
    });
    let s = batch.similarities(g)?;
    let st = g.scale(s, 1.0 / cfg.tau);
    let lw = g.constant(from_matrix(&logw));
    let logits = g.add(st, lw)?;
    nce_from_logits(g, logits, n)
}

/// Mixing coefficient and noise for one synthetic row.
#[derive(Clone, Debug, PartialEq)]
pub struct NfmDraw {
    pub lambda: f64,
    pub xi_add: Vec<f64>,
    pub xi_mult: Vec<f64>,
}

impl NfmDraw {
    pub fn sample(width: usize, cfg: &NfmConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let beta = Beta::new(cfg.alpha, cfg.beta)
            .map_err(|e| invalid(format!("nfm beta distribution: {e}")))?;
        let lambda = beta.sample(rng);
        let xi_add = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        let xi_mult = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            lambda,
            xi_add,
            xi_mult,
        })
    }
}

/// `(1 + σ_mult·ξ_mult) ⊙ (λ·g + (1-λ)·g2) + σ_add·ξ_add`, before normalization.
pub fn nfm_mix_with(g1: &[f64], g2: &[f64], cfg: &NfmConfig, draw: &NfmDraw) -> Result<Vec<f64>> {
    if g1.len() != g2.len() || draw.xi_add.len() != g1.len() || draw.xi_mult.len() != g1.len() {
        return Err(invalid(format!(
            "nfm widths differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    let l = draw.lambda;
    Ok((0..g1.len())
        .map(|e| {
            let mix = l * g1[e] + (1.0 - l) * g2[e];
            (1.0 + cfg.sigma_mult * draw.xi_mult[e]) * mix + cfg.sigma_add * draw.xi_add[e]
        })
        .collect())
}

pub fn nfm_mix(g1: &[f64], g2: &[f64], cfg: &NfmConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<f64>> {
    if g1.len() != g2.len() {
        return Err(invalid(format!("nfm widths differ: {} vs {}", g1.len(), g2.len())));
    }
    let draw = NfmDraw::sample(g1.len(), cfg, rng)?;
    nfm_mix_with(g1, g2, cfg, &draw)
}

/// Uniform random cyclic permutation (no fixed points) of `0..n`.
pub fn derangement(n: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Appends `N-1` synthetic negatives per anchor.
///
/// Anchor `i` sees negatives `neg_i = [j ≠ i]`; slot `m` mixes `neg_i[m]`
/// with `neg_i[σ(m)]` for a seeded derangement `σ`. The mixing coefficient
/// and noise are drawn once per slot and shared by all anchors.
pub fn augment_negatives<T: Real>(
    g: &mut Graph<T>,
    batch: PatchBatch,
    cfg: &NfmConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<PatchBatch> {
    if !cfg.enabled {
        return Ok(batch);
    }
    if batch.synthetic.is_some() {
        return Err(invalid("batch already carries synthetic negatives"));
    }
    let n = batch.n(g);
    if n < 3 {
        return Err(invalid(format!("nfm needs N >= 3 to mix distinct negatives, got {n}")));
    }
    let e = g.shape(batch.keys)[1];
    let k = n - 1;
    let sigma = derangement(k, rng);
    let draws = (0..k)
        .map(|_| NfmDraw::sample(e, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let neg = |i: usize, m: usize| if m < i { m } else { m + 1 };
    let mut ia = Vec::with_capacity(n * k);
    let mut ib = Vec::with_capacity(n * k);
    for i in 0..n {
        for m in 0..k {
            ia.push(neg(i, m));
            ib.push(neg(i, sigma[m]));
        }
    }
    let rows = n * k;
    let per_slot = |f: &dyn Fn(&NfmDraw, usize) -> f64| {
        Tensor::<T>::from_fn(&[rows, e], |idx| {
            let (r, c) = (idx / e, idx % e);
            T::from_f64(f(&draws[r % k], c))
        })
    };
    let lam = per_slot(&|d, _| d.lambda);
    let one_minus = per_slot(&|d, _| 1.0 - d.lambda);
    let mult = per_slot(&|d, c| 1.0 + cfg.sigma_mult * d.xi_mult[c]);
    let add = per_slot(&|d, c| cfg.sigma_add * d.xi_add[c]);
    let a = g.gather_rows(batch.keys, &ia)?;
    let b = g.gather_rows(batch.keys, &ib)?;
    let (lam, one_minus, mult, add) = (
        g.constant(lam),
        g.constant(one_minus),
        g.constant(mult),
        g.constant(add),
    );
    let a = g.mul(a, lam)?;
    let b = g.mul(b, one_minus)?;
    let mix = g.add(a, b)?;
    let mix = g.mul(mix, mult)?;
    let mix = g.add(mix, add)?;
    let mix = g.l2_normalize_rows_clamped(mix, NORM_FLOOR)?;
    let syn = g.reshape(mix, &[n, k, e])?;
    Ok(PatchBatch {
        synthetic: Some(syn),
        ..batch
    })
}
