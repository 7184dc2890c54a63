//! Optimizer, schedules, classifier training, annotation and evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ttl_tensor::{Graph, Tensor};

use crate::error::{invalid, Error, Result};
use crate::nets::{argmax_rows, Classifier, ModelConfig, NUM_TAPS};
use crate::objectives::{cross_entropy, Objective};
use crate::params::ParamSet;
use crate::synth::{splitmix, Shard};

/// Training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CycleganTtl,
    C3ttl,
}

/// Components switched off in an ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_cycle: bool,
    pub patchnce_only: bool,
    pub no_qs: bool,
    pub no_nfm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 40,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub ablation: AblationFlags,
    pub epochs: usize,
    /// Caps the number of batches per epoch; `None` sweeps the whole split.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_late: f64,
    /// First epoch trained at `lr_late`.
    pub lr_decay_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub classifier: ClassifierTrainConfig,
    pub finetune_epochs: usize,
    pub d_update_period: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Encoder taps used by the contrastive terms.
    pub nce_layers: Vec<usize>,
    /// Largest feature map (H·W) accepted by the query-selection attention.
    pub attention_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C3ttl,
            ablation: AblationFlags::default(),
            epochs: 50,
            iters_per_epoch: None,
            batch_size: 16,
            lr: 2e-4,
            lr_late: 1e-4,
            lr_decay_epoch: 30,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            classifier: ClassifierTrainConfig::default(),
            finetune_epochs: 10,
            d_update_period: 5,
            seed: 7,
            model: ModelConfig::default(),
            nce_layers: (0..NUM_TAPS).collect(),
            attention_cap: crate::qs_attention::DEFAULT_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        if self.d_update_period == 0 {
            return Err(Error::Config("d_update_period must be >= 1".into()));
        }
        if self.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(Error::Config("batch sizes must be > 0".into()));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::Config("iters_per_epoch must be > 0 when set".into()));
        }
        let lrs = [self.lr, self.lr_late, self.classifier.lr];
        if lrs.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates must be finite and > 0".into()));
        }
        let betas = [self.adam_beta1, self.adam_beta2, self.classifier.beta1, self.classifier.beta2];
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        if self.nce_layers.is_empty() || self.nce_layers.iter().any(|&l| l >= NUM_TAPS) {
            return Err(Error::Config(format!("nce_layers must be non-empty taps below {NUM_TAPS}")));
        }
        let mut sorted = self.nce_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.nce_layers.len() {
            return Err(Error::Config("nce_layers must be distinct".into()));
        }
        self.model.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn objective(&self) -> Objective {
        match self.variant {
            Variant::CycleganTtl => Objective::CycleGanTtl,
            Variant::C3ttl => Objective::C3ttl,
        }
    }

    pub fn gan_adam(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            lr: self.lr_at(epoch),
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: ADAM_EPS,
        }
    }

    pub fn classifier_adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.classifier.lr,
            beta1: self.classifier.beta1,
            beta2: self.classifier.beta2,
            eps: ADAM_EPS,
        }
    }
}

/// Independent deterministic RNG stream derived from a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ stream))
}

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState, grads: &[Tensor], h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, gr) in params.tensors().iter().zip(grads) {
        if p.shape() != gr.shape() {
            return Err(invalid(format!(
                "gradient shape {:?} does not match parameter {:?}",
                gr.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for ((p, gr), (m, v)) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(gr.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv as f64;
            let m1 = h.beta1 * *mv as f64 + (1.0 - h.beta1) * gv;
            let v1 = h.beta2 * *vv as f64 + (1.0 - h.beta2) * gv * gv;
            *mv = m1 as f32;
            *vv = v1 as f32;
            let upd = h.lr * (m1 / bc1) / ((v1 / bc2).sqrt() + h.eps);
            *pv = (*pv as f64 - upd) as f32;
        }
    }
    Ok(())
}

/// Batches of a shuffled index range; the last batch may be shorter.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// One cross-entropy step on a classifier; returns the batch loss.
pub fn classifier_step(
    clf: &mut Classifier,
    state: &mut OptimizerState,
    images: Tensor,
    labels: &[usize],
    h: &AdamHyper,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = clf.params.bind(&mut g, true);
    let x = g.constant(images);
    let pass = clf.forward(&mut g, &b, x)?;
    let loss = cross_entropy(&mut g, pass.logits, labels)?;
    let value = g.scalar_value(loss) as f64;
    let grads = g.backward(loss)?;
    let gr = clf.params.collect_grads(&b, &grads);
    adam_step(&mut clf.params, state, &gr, h)?;
    Ok(value)
}

/// Mean cross-entropy of a classifier over a shard.
pub fn mean_cross_entropy(clf: &Classifier, shard: &Shard) -> Result<f64> {
    let (logits, _) = clf.evaluate(&shard.images)?;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = cross_entropy(&mut g, l, &shard.labels)?;
    Ok(g.scalar_value(ce) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

/// Trains a classifier from scratch on a labeled shard.
pub fn train_source_classifier(
    cfg: &TrainConfig,
    n_classes: usize,
    train: &Shard,
    test: Option<&Shard>,
) -> Result<(Classifier, ClassifierMetrics)> {
    if train.is_empty() {
        return Err(invalid("source classifier needs a non-empty training shard"));
    }
    let mut init = stream_rng(cfg.seed, 0xc1a5);
    let mut clf = Classifier::new(&cfg.model, n_classes, &mut init)?;
    let mut state = OptimizerState::new(&clf.params);
    let mut order = stream_rng(cfg.seed, 0xc1a6);
    let h = cfg.classifier_adam();
    let mut epoch_losses = Vec::with_capacity(cfg.classifier.epochs);
    for _ in 0..cfg.classifier.epochs {
        let mut sum = 0.0;
        for batch in shuffled_batches(train.len(), cfg.classifier.batch_size, &mut order) {
            let (x, y) = train.batch(&batch)?;
            sum += classifier_step(&mut clf, &mut state, x, &y, &h)? * batch.len() as f64;
        }
        epoch_losses.push(sum / train.len() as f64);
    }
    let test_accuracy = match test {
        Some(t) => Some(annotate(&clf, &t.images, Some(&t.labels))?.accuracy),
        None => None,
    };
    Ok((
        clf,
        ClassifierMetrics {
            epoch_losses,
            test_accuracy,
        },
    ))
}

/// Predicted labels of a classifier and, with ground truth, its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub predictions: Vec<usize>,
    /// Empty without ground truth.
    pub per_class_accuracy: Vec<f64>,
    pub accuracy: f64,
    /// Row-normalized; row `t` holds the prediction distribution of class `t`.
    pub confusion: Vec<Vec<f64>>,
}

/// Arg-max labels for `images`, scored against `truth` when given.
pub fn annotate(clf: &Classifier, images: &Tensor, truth: Option<&[usize]>) -> Result<AnnotationResult> {
    let (logits, _) = clf.evaluate(images)?;
    let predictions = argmax_rows(&logits);
    let Some(truth) = truth else {
        return Ok(AnnotationResult {
            predictions,
            per_class_accuracy: Vec::new(),
            accuracy: f64::NAN,
            confusion: Vec::new(),
        });
    };
    score(predictions, truth, clf.n_classes())
}

/// Accuracy, per-class accuracy and row-normalized confusion.
pub fn score(predictions: Vec<usize>, truth: &[usize], n_classes: usize) -> Result<AnnotationResult> {
    if truth.len() != predictions.len() {
        return Err(invalid(format!(
            "{} labels for {} predictions",
            truth.len(),
            predictions.len()
        )));
    }
    if truth.iter().chain(&predictions).any(|&c| c >= n_classes) {
        return Err(invalid("label out of range"));
    }
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        counts[t][p] += 1;
    }
    let confusion: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect();
    let per_class_accuracy = (0..n_classes).map(|c| confusion[c][c]).collect();
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    Ok(AnnotationResult {
        predictions,
        per_class_accuracy,
        accuracy,
        confusion,
    })
}

/// Stratified subset: `ceil(fraction·n_c)` indices of every class.
pub fn stratified_subset(labels: &[usize], n_classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("labeled fraction must be in (0,1], got {fraction}")));
    }
    let mut picked = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let take = (fraction * members.len() as f64 - 1e-9).ceil() as usize;
        if take == 0 {
            return Err(invalid(format!("class {c} gets no labeled samples at fraction {fraction}")));
        }
        members.shuffle(rng);
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Fine-tunes a copy of the target classifier on a stratified fraction of
/// labeled target data and evaluates it on `eval`.
pub fn finetune_target(
    target: &Classifier,
    cfg: &TrainConfig,
    labeled_pool: &Shard,
    fraction: f64,
    eval: &Shard,
) -> Result<(Classifier, AnnotationResult)> {
    let mut rng = stream_rng(cfg.seed, 0xf1e7 ^ fraction.to_bits());
    let subset = stratified_subset(&labeled_pool.labels, target.n_classes(), fraction, &mut rng)?;
    let mut clf = target.clone();
    let mut state = OptimizerState::new(&clf.params);
    let h = cfg.classifier_adam();
    for _ in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = subset.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.classifier.batch_size) {
            let (x, y) = labeled_pool.batch(chunk)?;
            classifier_step(&mut clf, &mut state, x, &y, &h)?;
        }
    }
    let result = annotate(&clf, &eval.images, Some(&eval.labels))?;
    Ok((clf, result))
}

/// Rows of a `[N,F]` tensor as a matrix.
pub fn feature_matrix(t: &Tensor) -> DMatrix<f64> {
    let (n, f) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_iterator(n, f, t.data().iter().map(|&v| v as f64))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Covariance regularizer added to both sets.
pub const FRECHET_REG: f64 = 1e-6;

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-8) {
        return Err(invalid(format!("matrix has negative eigenvalue {bad}")));
    }
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets (rows).
pub fn frechet_lite(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let f = a.ncols();
    if b.ncols() != f {
        return Err(invalid(format!("feature widths differ: {f} vs {}", b.ncols())));
    }
    if a.nrows() < f + 1 || b.nrows() < f + 1 {
        return Err(invalid(format!("each set needs at least {} samples", f + 1)));
    }
    let (mu_a, mut sa) = mean_cov(a);
    let (mu_b, mut sb) = mean_cov(b);
    for i in 0..f {
        sa[(i, i)] += FRECHET_REG;
        sb[(i, i)] += FRECHET_REG;
    }
    let ra = sym_sqrt(&sa)?;
    let inner = &ra * &sb * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut tr_sqrt = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < -1e-8 {
            return Err(invalid(format!("covariance product has negative eigenvalue {l}")));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let d = (&mu_a - &mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Penultimate features of the frozen classifier for a batch of images.
pub fn classifier_features(clf: &Classifier, images: &Tensor) -> Result<DMatrix<f64>> {
    Ok(feature_matrix(&clf.evaluate(images)?.1))
}
