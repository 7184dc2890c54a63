use std::path::Path;

use ttl_core::config::*;
use ttl_core::trainer::Variant;

fn overlay(doc: &str) -> ttl_core::Result<RunConfig> {
    RunConfig::from_json_over(&RunConfig::desk(), doc, Path::new("test.json"))
}

#[test]
fn presets_are_valid() {
    RunConfig::desk().validate().unwrap();
    RunConfig::paper().validate().unwrap();
    let d = RunConfig::desk();
    assert_eq!((d.train.epochs, d.train.batch_size, d.dataset.image_size), (20, 16, 32));
    let p = RunConfig::paper();
    assert_eq!((p.train.epochs, p.train.batch_size, p.train.lr_decay_epoch), (50, 160, 30));
    assert_eq!((p.train.lr, p.train.lr_late), (2e-4, 1e-4));
}

#[test]
fn preset_names_parse() {
    assert_eq!("desk".parse::<Preset>().unwrap(), Preset::Desk);
    assert_eq!("paper".parse::<Preset>().unwrap(), Preset::Paper);
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn overlay_keeps_unspecified_values() {
    let cfg = overlay(r#"{"train": {"seed": 42, "variant": "cyclegan_ttl", "model": {"embed_dim": 12}}}"#).unwrap();
    let desk = RunConfig::desk();
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.train.variant, Variant::CycleganTtl);
    assert_eq!(cfg.train.model.embed_dim, 12);
    assert_eq!(cfg.train.model.gen_channels, desk.train.model.gen_channels);
    assert_eq!(cfg.contrastive, desk.contrastive);
    assert_eq!(overlay("{}").unwrap(), desk);
}

#[test]
fn overlay_rejects_unknown_and_invalid_values() {
    assert!(overlay(r#"{"train": {"sead": 1}}"#).is_err());
    assert!(overlay(r#"{"bogus": 1}"#).is_err());
    assert!(overlay(r#"{"contrastive": {"tau": -1.0}}"#).is_err());
    assert!(overlay(r#"{"train": {"batch_size": 5000}}"#).is_err());
    assert!(overlay("[1, 2]").is_err());
    assert!(overlay("{").is_err());
}

#[test]
fn load_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"output_dir": "elsewhere"}"#).unwrap();
    let cfg = RunConfig::load(&path, Preset::Paper).unwrap();
    assert_eq!(cfg.output_dir, Path::new("elsewhere"));
    assert_eq!(cfg.train.batch_size, 160);
    assert!(RunConfig::load(&dir.path().join("missing.json"), Preset::Desk).is_err());
}

#[test]
fn serialized_config_round_trips() {
    let cfg = RunConfig::desk();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(overlay(&text).unwrap(), cfg);
}
