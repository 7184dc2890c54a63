//! `ttl` command line: data generation, training, evaluation, annotation,
//! translation panels, gradient checks, ablations and reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use ttl_core::config::{Preset, RunConfig};
use ttl_core::gradsuite::{all_pass, full_suite, GRAD_TOL};
use ttl_core::io::{read_json, write_json, write_ppm, panel, RunManifest};
use ttl_core::pipeline::{
    ablate, ablation_csv, evaluate, full_variant_is_best, prepare, standard_variants, train_and_evaluate, Prepared,
    SOURCE, TARGET,
};
use ttl_core::synth::{generate_dataset, Split};
use ttl_core::trainer::{annotate, Variant};
use ttl_core::ttl::{TtlModels, CHECKPOINT_DIR, MANIFEST_FILE};
use ttl_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "ttl", version, about = "Unpaired translation and target annotation on a synthetic two-domain dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Overrides the training seed, which also seeds the dataset.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VariantArg {
    C3ttl,
    CycleganTtl,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Direction {
    A2b,
    B2a,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the dataset shards.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the source classifier and a translation run, then evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Re-evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Label the target test images with the target classifier.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write input/translated/reconstructed panels.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Direction::A2b)]
        direction: Direction,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train and evaluate the six ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize the run and ablation outputs.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> ttl_core::Result<RunConfig> {
    let preset = match c.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root().join("run")
}

fn checkpoint_dir(cfg: &RunConfig, explicit: &Option<PathBuf>) -> ttl_core::Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| run_dir(cfg).join(CHECKPOINT_DIR));
    if !dir.join("index.json").is_file() {
        return Err(Error::Config(format!("no checkpoint at {}", dir.display())));
    }
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> ttl_core::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish<T: Serialize>(dir: &Path, cfg: &RunConfig, evaluation: &[(&str, f64)], extra: Option<(&str, &T)>) -> ttl_core::Result<()> {
    let mut m = RunManifest::new(cfg.train.seed, cfg)?;
    m.status = "completed".into();
    for (k, v) in evaluation {
        m.evaluation.insert((*k).into(), *v);
    }
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    if let Some((name, value)) = extra {
        write_json(&dir.join(name), value)?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> ttl_core::Result<()> {
    let dir = cfg.output_root().join("data");
    let ds = generate_dataset(&cfg.dataset, cfg.train.seed)?;
    let files = ds.save(&dir)?;
    finish::<()>(&dir, cfg, &[("images", ds.total_images() as f64)], None)?;
    println!("wrote {} shard files to {}", files.len(), dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> ttl_core::Result<()> {
    let prep = prepare(cfg)?;
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let r = train_and_evaluate(cfg, &prep, Some(&dir))?;
    for (k, v) in &r.run.manifest.evaluation {
        println!("{k}: {v:.4}");
    }
    println!("run written to {}", dir.display());
    Ok(())
}

fn load_models(cfg: &RunConfig, ckpt: &Option<PathBuf>) -> ttl_core::Result<TtlModels> {
    let dir = checkpoint_dir(cfg, ckpt)?;
    TtlModels::load(&dir, &cfg.train, cfg.dataset.n_classes)
}

fn eval(cfg: &RunConfig, ckpt: &Option<PathBuf>) -> ttl_core::Result<()> {
    let models = load_models(cfg, ckpt)?;
    let dataset = generate_dataset(&cfg.dataset, cfg.train.seed)?;
    let prep = Prepared::from_classifier(dataset, models.c_src.clone())?;
    let e = evaluate(cfg, &prep, &models)?;
    let scores = [
        ("raw_source_on_target", e.raw_source_on_target),
        ("no_label_accuracy", e.no_label.accuracy),
        ("one_percent_accuracy", e.one_percent.accuracy),
        ("ten_percent_accuracy", e.ten_percent.accuracy),
        ("frechet_translated", e.frechet_translated),
        ("frechet_raw", e.frechet_raw),
    ];
    let dir = cfg.output_root().join("eval");
    finish(&dir, cfg, &scores, Some(("evaluation.json", &e)))?;
    for (k, v) in scores {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

fn annotate_cmd(cfg: &RunConfig, ckpt: &Option<PathBuf>) -> ttl_core::Result<()> {
    let models = load_models(cfg, ckpt)?;
    let dataset = generate_dataset(&cfg.dataset, cfg.train.seed)?;
    let test = dataset.shard(TARGET, Split::Test);
    let r = annotate(&models.c_tgt, &test.images, Some(&test.labels))?;
    let dir = cfg.output_root().join("annotate");
    let mut csv = String::from("index,prediction,truth\n");
    for (i, (p, t)) in r.predictions.iter().zip(&test.labels).enumerate() {
        csv.push_str(&format!("{i},{p},{t}\n"));
    }
    write_text(&dir.join("annotations.csv"), &csv)?;
    finish(&dir, cfg, &[("accuracy", r.accuracy)], Some(("annotation.json", &r)))?;
    println!("accuracy: {:.4}", r.accuracy);
    Ok(())
}

fn translate(cfg: &RunConfig, ckpt: &Option<PathBuf>, direction: Direction, count: usize) -> ttl_core::Result<()> {
    let models = load_models(cfg, ckpt)?;
    let dataset = generate_dataset(&cfg.dataset, cfg.train.seed)?;
    let (domain, fwd, back, tag) = match direction {
        Direction::A2b => (SOURCE, &models.g_xy, &models.g_yx, "a2b"),
        Direction::B2a => (TARGET, &models.g_yx, &models.g_xy, "b2a"),
    };
    let with_cycle = cfg.train.variant == Variant::CycleganTtl || !cfg.train.ablation.no_cycle;
    let shard = dataset.shard(domain, Split::Test);
    let dir = cfg.output_root().join("translate");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = count.min(shard.len());
    for i in 0..n {
        let x = shard.image(i)?;
        let y = fwd.generator_forward(&x)?;
        let mut cols = vec![x, y.clone()];
        if with_cycle {
            cols.push(back.generator_forward(&y)?);
        }
        write_ppm(&dir.join(format!("{tag}_{i:03}.ppm")), &panel(&cols, PANEL_GUTTER)?)?;
    }
    finish::<()>(&dir, cfg, &[("panels", n as f64)], None)?;
    println!("wrote {n} panels to {}", dir.display());
    Ok(())
}

/// White columns between panel images.
pub const PANEL_GUTTER: usize = 2;

fn gradcheck(seed: u64) -> ttl_core::Result<bool> {
    let entries = full_suite(seed)?;
    for e in &entries {
        let verdict = if e.max_rel_error < GRAD_TOL { "ok" } else { "FAIL" };
        println!("{:<32} {:.3e} {verdict}", e.name, e.max_rel_error);
    }
    let ok = all_pass(&entries);
    println!("{} checks, {}", entries.len(), if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn ablate_cmd(cfg: &RunConfig) -> ttl_core::Result<()> {
    let prep = prepare(cfg)?;
    let dir = cfg.output_root().join("ablation");
    let rows = ablate(cfg, &prep, &standard_variants(), Some(&dir))?;
    print!("{}", ablation_csv(&rows));
    match full_variant_is_best(&rows) {
        Some(true) => println!("full variant has the best no-label accuracy"),
        Some(false) => println!("full variant does not have the best no-label accuracy"),
        None => println!("full variant failed"),
    }
    Ok(())
}

fn report(cfg: &RunConfig) -> ttl_core::Result<()> {
    let root = cfg.output_root();
    let mut text = String::from("# Run report\n\n");
    let manifest = run_dir(cfg).join(MANIFEST_FILE);
    if manifest.is_file() {
        let m: RunManifest = read_json(&manifest)?;
        text.push_str(&format!("seed {} status {} epochs {}\n\n", m.seed, m.status, m.epochs.len()));
        text.push_str("| metric | value |\n|---|---|\n");
        for (k, v) in &m.evaluation {
            text.push_str(&format!("| {k} | {v:.4} |\n"));
        }
        text.push('\n');
        if !m.hash_is_consistent() {
            text.push_str("config hash does not match the stored config\n\n");
        }
    }
    let table = root.join("ablation").join("ablation.csv");
    if table.is_file() {
        let csv = fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
        text.push_str("## Ablation\n\n```\n");
        text.push_str(&csv);
        text.push_str("```\n");
    }
    if !manifest.is_file() && !table.is_file() {
        return Err(Error::Config(format!("nothing to report under {}", root.display())));
    }
    write_text(&root.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn dispatch(cli: Cli) -> ttl_core::Result<bool> {
    match cli.command {
        Command::GenData { common } => gen_data(&load_config(&common)?)?,
        Command::Train { common, variant } => {
            let mut cfg = load_config(&common)?;
            match variant {
                Some(VariantArg::C3ttl) => cfg.train.variant = Variant::C3ttl,
                Some(VariantArg::CycleganTtl) => cfg.train.variant = Variant::CycleganTtl,
                None => {}
            }
            train(&cfg)?
        }
        Command::Eval { common, checkpoint } => eval(&load_config(&common)?, &checkpoint)?,
        Command::Annotate { common, checkpoint } => annotate_cmd(&load_config(&common)?, &checkpoint)?,
        Command::Translate {
            common,
            checkpoint,
            direction,
            count,
        } => translate(&load_config(&common)?, &checkpoint, direction, count)?,
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::Ablate { common } => ablate_cmd(&load_config(&common)?)?,
        Command::Report { common } => report(&load_config(&common)?)?,
    }
    Ok(true)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on usage or validation errors, 2 when training diverges or the gradient
/// suite fails.
pub fn run<S: AsRef<str>>(argv: &[S]) -> u8 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
