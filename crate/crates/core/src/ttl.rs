//! Joint training of the two translators, their discriminators and the
//! target classifier.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ttl_tensor::{Graph, Tensor, Var};

use crate::contrastive::ContrastiveConfig;
use crate::error::{invalid, Error, Result};
use crate::hcut::{nce_loss, NceSettings, Translator};
use crate::io::{write_json, write_metrics_csv, EpochRecord, MetricsRow, RunManifest};
use crate::nets::{Classifier, Discriminator, Generator, MlpHeads};
use crate::objectives::{
    cross_entropy, gan_value, generator_adversarial, identity_loss, cycle_loss, weighted_total_graph, LossReport,
    ObjectiveWeights, Term,
};
use crate::params::{load_into, save_checkpoint, ParamSet};
use crate::synth::Shard;
use crate::trainer::{adam_step, annotate, shuffled_batches, stream_rng, OptimizerState, TrainConfig, Variant};

/// Every network of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TtlModels {
    pub g_xy: Generator,
    pub g_yx: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    /// Projection heads on the encoder of `g_xy`.
    pub h1: MlpHeads,
    /// Projection heads on the encoder of `g_yx`.
    pub h2: MlpHeads,
    /// Frozen source classifier.
    pub c_src: Classifier,
    pub c_tgt: Classifier,
}

impl TtlModels {
    /// Fresh translators and discriminators; the target classifier starts as
    /// an exact copy of the source classifier.
    pub fn init(cfg: &TrainConfig, c_src: &Classifier) -> Result<Self> {
        let m = &cfg.model;
        let mut rng = stream_rng(cfg.seed, 0x6e17);
        let g_xy = Generator::new(m, &mut rng)?;
        let g_yx = Generator::new(m, &mut rng)?;
        let d_x = Discriminator::new(m, &mut rng)?;
        let d_y = Discriminator::new(m, &mut rng)?;
        let taps = g_xy.tap_channels();
        let chans: Vec<usize> = cfg.nce_layers.iter().map(|&l| taps[l]).collect();
        let h1 = MlpHeads::new(&chans, m.embed_dim, &mut rng)?;
        let h2 = MlpHeads::new(&chans, m.embed_dim, &mut rng)?;
        Ok(Self {
            g_xy,
            g_yx,
            d_x,
            d_y,
            h1,
            h2,
            c_src: c_src.clone(),
            c_tgt: c_src.clone(),
        })
    }

    fn sets(&self) -> [(&'static str, &ParamSet); 8] {
        [
            ("g_xy", &self.g_xy.params),
            ("g_yx", &self.g_yx.params),
            ("d_x", &self.d_x.params),
            ("d_y", &self.d_y.params),
            ("h1", &self.h1.params),
            ("h2", &self.h2.params),
            ("c_src", &self.c_src.params),
            ("c_tgt", &self.c_tgt.params),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.sets())
    }

    /// Rebuilds the architecture from `cfg` and fills it from `dir`.
    pub fn load(dir: &Path, cfg: &TrainConfig, n_classes: usize) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, 0);
        let c = Classifier::new(&cfg.model, n_classes, &mut rng)?;
        let mut m = Self::init(cfg, &c)?;
        load_into(dir, "g_xy", &mut m.g_xy.params)?;
        load_into(dir, "g_yx", &mut m.g_yx.params)?;
        load_into(dir, "d_x", &mut m.d_x.params)?;
        load_into(dir, "d_y", &mut m.d_y.params)?;
        load_into(dir, "h1", &mut m.h1.params)?;
        load_into(dir, "h2", &mut m.h2.params)?;
        load_into(dir, "c_src", &mut m.c_src.params)?;
        load_into(dir, "c_tgt", &mut m.c_tgt.params)?;
        Ok(m)
    }
}

struct Optimizers {
    g_xy: OptimizerState,
    g_yx: OptimizerState,
    h1: OptimizerState,
    h2: OptimizerState,
    c_tgt: OptimizerState,
    d_x: OptimizerState,
    d_y: OptimizerState,
}

impl Optimizers {
    fn new(m: &TtlModels) -> Self {
        Self {
            g_xy: OptimizerState::new(&m.g_xy.params),
            g_yx: OptimizerState::new(&m.g_yx.params),
            h1: OptimizerState::new(&m.h1.params),
            h2: OptimizerState::new(&m.h2.params),
            c_tgt: OptimizerState::new(&m.c_tgt.params),
            d_x: OptimizerState::new(&m.d_x.params),
            d_y: OptimizerState::new(&m.d_y.params),
        }
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TtlRun {
    pub models: TtlModels,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
    pub discriminator_updates: usize,
    pub iterations: usize,
}

/// Everything that shapes a training run, recorded in its manifest.
#[derive(Clone, Debug, Serialize)]
pub struct TtlSettings<'a> {
    pub train: &'a TrainConfig,
    pub contrastive: &'a ContrastiveConfig,
    pub objective: &'a ObjectiveWeights,
}

impl TtlSettings<'_> {
    fn cycle(&self) -> bool {
        !self.train.ablation.no_cycle
    }

    fn nce(&self) -> bool {
        self.train.variant == Variant::C3ttl
    }

    fn coefficients(&self, epoch: usize) -> Vec<(Term, f64)> {
        let cycle = self.cycle();
        self.objective
            .coefficients(self.train.objective(), epoch)
            .into_iter()
            .filter(|(t, _)| cycle || *t != Term::Cycle)
            .collect()
    }

    fn nce_settings(&self) -> NceSettings<'_> {
        let a = &self.train.ablation;
        NceSettings {
            cfg: self.contrastive,
            layers: &self.train.nce_layers,
            query_selection: !a.no_qs,
            nfm: !a.no_nfm && self.contrastive.nfm.enabled,
            monce: !a.patchnce_only,
            attention_cap: self.train.attention_cap,
        }
    }
}

struct StepOutput {
    report: LossReport,
    fake_x: Tensor,
    fake_y: Tensor,
}

fn sigmoid_map(g: &mut Graph, d: &Discriminator, b: &crate::params::Bound, x: Var) -> Result<Var> {
    let l = d.forward(g, b, x)?;
    Ok(g.sigmoid(l))
}

fn generator_step(
    m: &mut TtlModels,
    opt: &mut Optimizers,
    s: &TtlSettings<'_>,
    (x, labels, y): (&Tensor, &[usize], &Tensor),
    (epoch, iteration): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let nce_on = s.nce();
    let mut g = Graph::new();
    let bxy = m.g_xy.params.bind(&mut g, true);
    let byx = m.g_yx.params.bind(&mut g, true);
    let bh1 = m.h1.params.bind(&mut g, nce_on);
    let bh2 = m.h2.params.bind(&mut g, nce_on);
    let bdx = m.d_x.params.bind(&mut g, false);
    let bdy = m.d_y.params.bind(&mut g, false);
    let bcs = m.c_src.params.bind(&mut g, false);
    let bct = m.c_tgt.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());

    let (fake_y, taps_x_xy) = m.g_xy.forward_with_taps(&mut g, &bxy, xv)?;
    let rec_x = m.g_yx.forward(&mut g, &byx, fake_y)?;
    let (fake_x, taps_y_yx) = m.g_yx.forward_with_taps(&mut g, &byx, yv)?;
    let (idt_y, taps_y_xy) = m.g_xy.forward_with_taps(&mut g, &bxy, yv)?;
    let (idt_x, taps_x_yx) = m.g_yx.forward_with_taps(&mut g, &byx, xv)?;

    let mut parts: BTreeMap<Term, Var> = BTreeMap::new();
    let py = sigmoid_map(&mut g, &m.d_y, &bdy, fake_y)?;
    let px = sigmoid_map(&mut g, &m.d_x, &bdx, fake_x)?;
    let ay = generator_adversarial(&mut g, py)?;
    let ax = generator_adversarial(&mut g, px)?;
    parts.insert(Term::Gan, g.add(ay, ax)?);
    if s.cycle() {
        let rec_y = m.g_xy.forward(&mut g, &bxy, fake_x)?;
        parts.insert(Term::Cycle, cycle_loss(&mut g, xv, rec_x, yv, rec_y)?);
    }
    parts.insert(Term::Identity, identity_loss(&mut g, idt_y, yv, idt_x, xv)?);
    if nce_on {
        let ns = s.nce_settings();
        let t1 = Translator {
            generator: &m.g_xy,
            generator_vars: &bxy,
            heads: &m.h1,
            head_vars: &bh1,
        };
        let t2 = Translator {
            generator: &m.g_yx,
            generator_vars: &byx,
            heads: &m.h2,
            head_vars: &bh2,
        };
        parts.insert(Term::Nce1, nce_loss(&mut g, &t1, &taps_x_xy, fake_y, &ns, rng)?);
        parts.insert(Term::Nce2, nce_loss(&mut g, &t2, &taps_y_yx, fake_x, &ns, rng)?);
        parts.insert(Term::Nce3, nce_loss(&mut g, &t2, &taps_x_yx, idt_x, &ns, rng)?);
        parts.insert(Term::Nce4, nce_loss(&mut g, &t1, &taps_y_xy, idt_y, &ns, rng)?);
    }
    let src = m.c_src.forward(&mut g, &bcs, rec_x)?;
    parts.insert(Term::CeSource, cross_entropy(&mut g, src.logits, labels)?);
    let fy = g.detach(fake_y);
    let tgt = m.c_tgt.forward(&mut g, &bct, fy)?;
    parts.insert(Term::CeTarget, cross_entropy(&mut g, tgt.logits, labels)?);

    let coeffs = s.coefficients(epoch);
    let total = weighted_total_graph(&mut g, &parts, &coeffs)?;

    let mut report = LossReport::new(epoch, iteration, s.train.objective());
    for (&t, &v) in &parts {
        report.parts.insert(t, g.scalar_value(v) as f64);
    }
    report.total = report.recompute(s.objective);
    if !report.total.is_finite() || !g.scalar_value(total).is_finite() {
        return Err(Error::Diverged { epoch, iteration });
    }

    let grads = g.backward(total)?;
    let hyper = s.train.gan_adam(epoch);
    let gxy = m.g_xy.params.collect_grads(&bxy, &grads);
    let gyx = m.g_yx.params.collect_grads(&byx, &grads);
    adam_step(&mut m.g_xy.params, &mut opt.g_xy, &gxy, &hyper)?;
    adam_step(&mut m.g_yx.params, &mut opt.g_yx, &gyx, &hyper)?;
    if nce_on {
        let g1 = m.h1.params.collect_grads(&bh1, &grads);
        let g2 = m.h2.params.collect_grads(&bh2, &grads);
        adam_step(&mut m.h1.params, &mut opt.h1, &g1, &hyper)?;
        adam_step(&mut m.h2.params, &mut opt.h2, &g2, &hyper)?;
    }
    let gct = m.c_tgt.params.collect_grads(&bct, &grads);
    adam_step(&mut m.c_tgt.params, &mut opt.c_tgt, &gct, &s.train.classifier_adam())?;
    Ok(StepOutput {
        report,
        fake_x: g.value(fake_x).clone(),
        fake_y: g.value(fake_y).clone(),
    })
}

/// One ascent step on the adversarial value for both discriminators.
fn discriminator_step(
    m: &mut TtlModels,
    opt: &mut Optimizers,
    s: &TtlSettings<'_>,
    (x, y): (&Tensor, &Tensor),
    (fake_x, fake_y): (Tensor, Tensor),
    epoch: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let bdx = m.d_x.params.bind(&mut g, true);
    let bdy = m.d_y.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let fx = g.constant(fake_x);
    let fy = g.constant(fake_y);
    let ry = sigmoid_map(&mut g, &m.d_y, &bdy, yv)?;
    let qy = sigmoid_map(&mut g, &m.d_y, &bdy, fy)?;
    let rx = sigmoid_map(&mut g, &m.d_x, &bdx, xv)?;
    let qx = sigmoid_map(&mut g, &m.d_x, &bdx, fx)?;
    let vy = gan_value(&mut g, ry, qy)?;
    let vx = gan_value(&mut g, rx, qx)?;
    let v = g.add(vx, vy)?;
    let loss = g.scale(v, -1.0);
    let value = g.scalar_value(v) as f64;
    let grads = g.backward(loss)?;
    let hyper = s.train.gan_adam(epoch);
    let gx = m.d_x.params.collect_grads(&bdx, &grads);
    let gy = m.d_y.params.collect_grads(&bdy, &grads);
    adam_step(&mut m.d_x.params, &mut opt.d_x, &gx, &hyper)?;
    adam_step(&mut m.d_y.params, &mut opt.d_y, &gy, &hyper)?;
    Ok(value)
}

fn mean_report(rows: &[MetricsRow], epoch: usize, s: &TtlSettings<'_>) -> LossReport {
    let mut r = LossReport::new(epoch, rows.len(), s.train.objective());
    for row in rows {
        for (&t, &v) in &row.report.parts {
            *r.parts.entry(t).or_insert(0.0) += v / rows.len() as f64;
        }
    }
    r.total = r.recompute(s.objective);
    r
}

/// Output files of a run inside its directory.
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn persist(out: Option<&Path>, manifest: &RunManifest, metrics: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = out {
        write_json(&dir.join(MANIFEST_FILE), manifest)?;
        write_metrics_csv(&dir.join(METRICS_FILE), metrics)?;
    }
    Ok(())
}

/// Trains a run. Source labels supervise the classifier terms; target
/// labels of `target_val` are used only to report accuracy.
///
/// With `out` set, the checkpoint is rewritten after every epoch and the
/// manifest and metrics CSV are written at the end. A non-finite total loss
/// aborts with [`Error::Diverged`], leaving the last completed epoch's
/// checkpoint in place.
pub fn train_ttl(
    s: &TtlSettings<'_>,
    source_train: &Shard,
    target_train: &Shard,
    target_val: &Shard,
    source_classifier: &Classifier,
    out: Option<&Path>,
) -> Result<TtlRun> {
    s.train.validate()?;
    s.contrastive.validate()?;
    s.objective.validate()?;
    if source_train.domain == target_train.domain {
        return Err(invalid("source and target shards come from the same domain"));
    }
    let bsz = s.train.batch_size;
    let per_epoch = source_train.len().min(target_train.len()) / bsz;
    if per_epoch == 0 {
        return Err(invalid(format!(
            "need at least {bsz} images per domain for one batch"
        )));
    }
    let per_epoch = s.train.iters_per_epoch.map_or(per_epoch, |c| c.min(per_epoch));
    let mut models = TtlModels::init(s.train, source_classifier)?;
    let mut opt = Optimizers::new(&models);
    let mut manifest = RunManifest::new(s.train.seed, s)?;
    let ckpt: Option<PathBuf> = out.map(|d| d.join(CHECKPOINT_DIR));
    if let Some(dir) = &ckpt {
        models.save(dir)?;
        manifest.checkpoints.push(CHECKPOINT_DIR.into());
    }
    let mut src_order = stream_rng(s.train.seed, 0x5c);
    let mut tgt_order = stream_rng(s.train.seed, 0x7a);
    let mut nce_rng = stream_rng(s.train.seed, 0x9ce);
    let mut metrics = Vec::new();
    let mut iteration = 0usize;
    let mut d_updates = 0usize;
    for epoch in 0..s.train.epochs {
        let sb = shuffled_batches(source_train.len(), bsz, &mut src_order);
        let tb = shuffled_batches(target_train.len(), bsz, &mut tgt_order);
        let epoch_start = metrics.len();
        for k in 0..per_epoch {
            let (x, labels) = source_train.batch(&sb[k])?;
            let (y, _) = target_train.batch(&tb[k])?;
            let step = match generator_step(
                &mut models,
                &mut opt,
                s,
                (&x, &labels, &y),
                (epoch, iteration),
                &mut nce_rng,
            ) {
                Ok(step) => step,
                Err(e @ Error::Diverged { .. }) => {
                    manifest.status = "diverged".into();
                    persist(out, &manifest, &metrics)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            metrics.push(MetricsRow {
                report: step.report,
                lr: s.train.lr_at(epoch),
                lambda_ce: s.objective.lambda_ce(epoch),
            });
            if (iteration + 1) % s.train.d_update_period == 0 {
                discriminator_step(&mut models, &mut opt, s, (&x, &y), (step.fake_x, step.fake_y), epoch)?;
                d_updates += 1;
            }
            iteration += 1;
        }
        let acc = annotate(&models.c_tgt, &target_val.images, Some(&target_val.labels))?.accuracy;
        manifest.epochs.push(EpochRecord {
            epoch,
            lr: s.train.lr_at(epoch),
            lambda_ce: s.objective.lambda_ce(epoch),
            iterations: per_epoch,
            discriminator_updates: d_updates,
            mean_loss: mean_report(&metrics[epoch_start..], epoch, s),
            target_val_accuracy: acc,
        });
        if let Some(dir) = &ckpt {
            models.save(dir)?;
        }
    }
    manifest.status = "completed".into();
    persist(out, &manifest, &metrics)?;
    Ok(TtlRun {
        models,
        manifest,
        metrics,
        discriminator_updates: d_updates,
        iterations: iteration,
    })
}
