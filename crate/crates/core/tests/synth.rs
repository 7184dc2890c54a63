use std::collections::HashSet;

use proptest::prelude::*;
use ttl_core::nets::ModelConfig;
use ttl_core::synth::*;
use ttl_core::trainer::{train_source_classifier, TrainConfig};

fn small(images_per_class: usize) -> DatasetSpec {
    DatasetSpec {
        images_per_class,
        image_size: 16,
        ..DatasetSpec::default()
    }
}

#[test]
fn default_dataset_counts() {
    let spec = DatasetSpec::default();
    assert_eq!(spec.split_counts(), (350, 75, 75));
    let ds = generate_dataset(&spec, 7).unwrap();
    assert_eq!(ds.total_images(), 4000);
    for d in [Domain::A, Domain::B] {
        for (split, per) in Split::ALL.into_iter().zip([350, 75, 75]) {
            let s = ds.shard(d, split);
            assert_eq!(s.images.shape(), &[per * 4, 3, 32, 32]);
            for c in 0..4 {
                assert_eq!(s.labels.iter().filter(|&&l| l == c).count(), per);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_dataset(&small(12), 5).unwrap();
    let b = generate_dataset(&small(12), 5).unwrap();
    let c = generate_dataset(&small(12), 6).unwrap();
    assert_eq!(a.shards, b.shards);
    assert_ne!(a.shard(Domain::A, Split::Train).images, c.shard(Domain::A, Split::Train).images);
}

#[test]
fn items_never_repeat_across_splits_or_domains() {
    let ds = generate_dataset(&small(40), 9).unwrap();
    let mut seen = HashSet::new();
    for s in &ds.shards {
        for &p in &s.pose_seeds {
            assert!(seen.insert(p), "pose seed {p} reused");
        }
    }
    assert_eq!(seen.len(), ds.total_images());
}

#[test]
fn pixels_stay_in_range() {
    let ds = generate_dataset(&small(10), 2).unwrap();
    for s in &ds.shards {
        assert!(s.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

fn channel_spread(s: &Shard) -> f64 {
    let n = s.len();
    let hw = s.images.shape()[2] * s.images.shape()[3];
    let d = s.images.data();
    let mut spread = 0.0f64;
    for i in 0..n {
        for p in 0..hw {
            let px: Vec<f32> = (0..3).map(|c| d[(i * 3 + c) * hw + p]).collect();
            spread = spread.max((px[0] - px[1]).abs().max((px[1] - px[2]).abs()) as f64);
        }
    }
    spread
}

fn mean(s: &Shard) -> f64 {
    s.images.data().iter().map(|&v| v as f64).sum::<f64>() / s.images.data().len() as f64
}

#[test]
fn domains_have_their_styles() {
    let ds = generate_dataset(&small(20), 3).unwrap();
    let a = ds.shard(Domain::A, Split::Train);
    let b = ds.shard(Domain::B, Split::Train);
    assert_eq!(channel_spread(b), 0.0);
    assert!(channel_spread(a) > 0.1);
    assert!(mean(a) > 0.2, "{}", mean(a));
    assert!(mean(b) < -0.2, "{}", mean(b));
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(8), 4).unwrap();
    let paths = ds.save(dir.path()).unwrap();
    assert_eq!(paths.len(), 12);
    let back = Dataset::load(dir.path(), small(8), 4).unwrap();
    assert_eq!(back.shards, ds.shards);
    assert!(Dataset::load(dir.path(), small(9), 4).is_err());
}

#[test]
fn spec_validation() {
    let bad = [
        DatasetSpec { n_classes: 1, ..DatasetSpec::default() },
        DatasetSpec { n_classes: 11, ..DatasetSpec::default() },
        DatasetSpec { split: [70, 20, 20], ..DatasetSpec::default() },
        DatasetSpec { image_size: 30, ..DatasetSpec::default() },
        DatasetSpec { images_per_class: 0, ..DatasetSpec::default() },
        DatasetSpec {
            shapes: vec![ShapeFamily::Disk, ShapeFamily::Disk, ShapeFamily::Bar, ShapeFamily::Ring],
            ..DatasetSpec::default()
        },
    ];
    for spec in bad {
        assert!(generate_dataset(&spec, 1).is_err());
    }
}

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.75);
    assert_eq!(accuracy(&[], &[]), 0.0);
}

#[test]
fn identical_styles_leave_no_gap() {
    let spec = DatasetSpec {
        domain_b_style: DomainStyle::visible(),
        ..small(160)
    };
    let ds = generate_dataset(&spec, 21).unwrap();
    let mut cfg = TrainConfig {
        seed: 5,
        model: ModelConfig {
            feature_dim: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.classifier.epochs = 15;
    cfg.classifier.lr = 3e-3;
    let (clf, _) = train_source_classifier(&cfg, 4, ds.shard(Domain::A, Split::Train), None).unwrap();
    let r = domain_gap_probe(&clf, ds.shard(Domain::A, Split::Test), ds.shard(Domain::B, Split::Test)).unwrap();
    assert!(r.source_accuracy > 0.5, "{r:?}");
    assert!(r.gap.abs() <= 0.12, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_counts_partition_every_class(n in 1usize..2000, a in 0usize..=100, b in 0usize..=100) {
        prop_assume!(a + b <= 100);
        let spec = DatasetSpec { images_per_class: n, split: [a, b, 100 - a - b], ..DatasetSpec::default() };
        let (tr, va, te) = spec.split_counts();
        prop_assert_eq!(tr + va + te, n);
    }

    #[test]
    fn pose_seeds_depend_on_every_coordinate(seed in any::<u64>(), class in 0usize..10, k in 0usize..1000) {
        let p = pose_seed(seed, Domain::A, class, k);
        prop_assert_ne!(p, pose_seed(seed, Domain::B, class, k));
        prop_assert_ne!(p, pose_seed(seed, Domain::A, class + 1, k));
        prop_assert_ne!(p, pose_seed(seed, Domain::A, class, k + 1));
    }
}
