//! End-to-end evaluation and the ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttl_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::nets::{Classifier, Generator};
use crate::synth::{domain_gap_probe, generate_dataset, Dataset, Domain, GapReport, Split};
use crate::trainer::{
    annotate, classifier_features, finetune_target, frechet_lite, train_source_classifier, AblationFlags,
    AnnotationResult, ClassifierMetrics, Variant,
};
use crate::ttl::{train_ttl, TtlModels, TtlRun, TtlSettings, MANIFEST_FILE};

pub const SOURCE: Domain = Domain::A;
pub const TARGET: Domain = Domain::B;

/// Dataset and source classifier shared by every variant of a seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub source_classifier: Classifier,
    pub source_metrics: ClassifierMetrics,
    pub gap: GapReport,
}

/// Renders the dataset and trains the source classifier.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset, cfg.train.seed)?;
    let (clf, metrics) = train_source_classifier(
        &cfg.train,
        cfg.dataset.n_classes,
        dataset.shard(SOURCE, Split::Train),
        Some(dataset.shard(SOURCE, Split::Test)),
    )?;
    let mut p = Prepared::from_classifier(dataset, clf)?;
    p.source_metrics.epoch_losses = metrics.epoch_losses;
    Ok(p)
}

impl Prepared {
    /// Wraps an already trained source classifier.
    pub fn from_classifier(dataset: Dataset, clf: Classifier) -> Result<Self> {
        let gap = domain_gap_probe(&clf, dataset.shard(SOURCE, Split::Test), dataset.shard(TARGET, Split::Test))?;
        Ok(Self {
            dataset,
            source_classifier: clf,
            source_metrics: ClassifierMetrics {
                epoch_losses: Vec::new(),
                test_accuracy: Some(gap.source_accuracy),
            },
            gap,
        })
    }
}

/// Translates a batch in chunks to bound graph memory.
pub fn translate_all(g: &Generator, images: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        parts.push(g.translate(&images.narrow_rows(start, len)?)?);
        start += len;
    }
    Ok(Tensor::stack_rows(&parts)?)
}

/// Scores of one trained variant on the target test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub raw_source_on_target: f64,
    pub no_label: AnnotationResult,
    pub one_percent: AnnotationResult,
    pub ten_percent: AnnotationResult,
    /// Source test translated into the target domain vs target test.
    pub frechet_translated: f64,
    /// Raw source test vs target test.
    pub frechet_raw: f64,
}

pub fn evaluate(cfg: &RunConfig, prep: &Prepared, models: &TtlModels) -> Result<Evaluation> {
    let ds = &prep.dataset;
    let src_test = ds.shard(SOURCE, Split::Test);
    let tgt_test = ds.shard(TARGET, Split::Test);
    let c_src = &models.c_src;
    let no_label = annotate(&models.c_tgt, &tgt_test.images, Some(&tgt_test.labels))?;
    let pool = ds.shard(TARGET, Split::Train);
    let (_, one_percent) = finetune_target(&models.c_tgt, &cfg.train, pool, 0.01, tgt_test)?;
    let (_, ten_percent) = finetune_target(&models.c_tgt, &cfg.train, pool, 0.10, tgt_test)?;
    let translated = translate_all(&models.g_xy, &src_test.images)?;
    let f_tgt = classifier_features(c_src, &tgt_test.images)?;
    let frechet_translated = frechet_lite(&classifier_features(c_src, &translated)?, &f_tgt)?;
    let frechet_raw = frechet_lite(&classifier_features(c_src, &src_test.images)?, &f_tgt)?;
    Ok(Evaluation {
        raw_source_on_target: prep.gap.target_accuracy,
        no_label,
        one_percent,
        ten_percent,
        frechet_translated,
        frechet_raw,
    })
}

/// Outcome of one full run.
#[derive(Clone, Debug)]
pub struct EndToEnd {
    pub run: TtlRun,
    pub evaluation: Evaluation,
}

/// Trains `cfg`'s variant on a prepared dataset and evaluates it. With `out`
/// set, the run directory receives the checkpoint, metrics and a manifest
/// that includes the evaluation scores.
pub fn train_and_evaluate(cfg: &RunConfig, prep: &Prepared, out: Option<&Path>) -> Result<EndToEnd> {
    let settings = TtlSettings {
        train: &cfg.train,
        contrastive: &cfg.contrastive,
        objective: &cfg.objective,
    };
    let ds = &prep.dataset;
    let mut run = train_ttl(
        &settings,
        ds.shard(SOURCE, Split::Train),
        ds.shard(TARGET, Split::Train),
        ds.shard(TARGET, Split::Val),
        &prep.source_classifier,
        out,
    )?;
    let evaluation = evaluate(cfg, prep, &run.models)?;
    let e = &mut run.manifest.evaluation;
    e.insert("source_test_accuracy".into(), prep.source_metrics.test_accuracy.unwrap_or(f64::NAN));
    e.insert("domain_gap".into(), prep.gap.gap);
    e.insert("raw_source_on_target".into(), evaluation.raw_source_on_target);
    e.insert("no_label_accuracy".into(), evaluation.no_label.accuracy);
    e.insert("one_percent_accuracy".into(), evaluation.one_percent.accuracy);
    e.insert("ten_percent_accuracy".into(), evaluation.ten_percent.accuracy);
    e.insert("frechet_translated".into(), evaluation.frechet_translated);
    e.insert("frechet_raw".into(), evaluation.frechet_raw);
    if let Some(dir) = out {
        write_json(&dir.join(MANIFEST_FILE), &run.manifest)?;
    }
    Ok(EndToEnd { run, evaluation })
}

/// One configured variant of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub variant: Variant,
    pub ablation: AblationFlags,
}

/// Name of the complete model's row.
pub const FULL_VARIANT: &str = "QS-Attn+MoNCE+cycle-consistency+NMF C3TTL";

/// The six rows: the CycleGAN baseline and five contrastive combinations.
pub fn standard_variants() -> Vec<AblationVariant> {
    let flags = |no_cycle, patchnce_only, no_qs, no_nfm| AblationFlags {
        no_cycle,
        patchnce_only,
        no_qs,
        no_nfm,
    };
    let c3 = |name: &str, f| AblationVariant {
        name: name.into(),
        variant: Variant::C3ttl,
        ablation: f,
    };
    vec![
        AblationVariant {
            name: "CycleGAN-TTL".into(),
            variant: Variant::CycleganTtl,
            ablation: AblationFlags::default(),
        },
        c3("QS-Attn+PatchNCE", flags(true, true, false, true)),
        c3("PatchNCE+cycle-consistency", flags(false, true, true, true)),
        c3("QS-Attn+MoNCE+cycle-consistency", flags(false, false, false, true)),
        c3("QS-Attn+MoNCE+NMF", flags(true, false, false, false)),
        c3(FULL_VARIANT, flags(false, false, false, false)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub no_label: f64,
    pub one_percent: f64,
    pub ten_percent: f64,
    pub frechet_lite: f64,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.status != "ok"
    }
}

pub const ABLATION_HEADER: &str = "variant,seed,status,no_label,one_percent,ten_percent,frechet_lite";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.variant),
            r.seed,
            csv_field(&r.status),
            r.no_label,
            r.one_percent,
            r.ten_percent,
            r.frechet_lite
        );
    }
    out
}

/// Directory name of a variant's run.
pub fn variant_slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

/// Trains every variant on the shared dataset and source classifier. A
/// variant that fails yields a `failed` row and the remaining variants still
/// run. With `out` set, each variant writes to its own subdirectory and the
/// table goes to `ablation.csv`.
pub fn ablate(
    cfg: &RunConfig,
    prep: &Prepared,
    variants: &[AblationVariant],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut vc = cfg.clone();
        vc.train.variant = v.variant;
        vc.train.ablation = v.ablation;
        let dir: Option<PathBuf> = out.map(|d| d.join(variant_slug(&v.name)));
        let outcome = match &dir {
            Some(d) => fs::create_dir_all(d)
                .map_err(|e| Error::io(d, e))
                .and_then(|_| train_and_evaluate(&vc, prep, Some(d))),
            None => train_and_evaluate(&vc, prep, None),
        };
        rows.push(match outcome {
            Ok(r) => AblationRow {
                variant: v.name.clone(),
                seed: vc.train.seed,
                status: "ok".into(),
                no_label: r.evaluation.no_label.accuracy,
                one_percent: r.evaluation.one_percent.accuracy,
                ten_percent: r.evaluation.ten_percent.accuracy,
                frechet_lite: r.evaluation.frechet_translated,
            },
            Err(e) => AblationRow {
                variant: v.name.clone(),
                seed: vc.train.seed,
                status: format!("failed: {e}"),
                no_label: f64::NAN,
                one_percent: f64::NAN,
                ten_percent: f64::NAN,
                frechet_lite: f64::NAN,
            },
        });
    }
    if let Some(d) = out {
        let path = d.join("ablation.csv");
        fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Whether the complete model has the best no-label accuracy among rows
/// that finished. Reported only.
pub fn full_variant_is_best(rows: &[AblationRow]) -> Option<bool> {
    let full = rows.iter().find(|r| r.variant == FULL_VARIANT && !r.failed())?;
    Some(
        rows.iter()
            .filter(|r| !r.failed())
            .all(|r| r.no_label <= full.no_label),
    )
}
