//! Procedural two-domain image dataset.
//!
//! Each latent item is a class shape under a random pose. By default domain A
//! renders it as a dark colored object on a bright textured background and
//! domain B as a bright grayscale object on a dark, blurred, noisy
//! background. The two domains draw independent poses, so no pixel-level
//! pairing exists.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ttl_tensor::{tnsr, Tensor};

use crate::error::{invalid, Error, Result};
use crate::nets::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Pentagon,
    Star,
    LShape,
    HalfDisk,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 10] = [
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Triangle,
        ShapeFamily::Bar,
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Pentagon,
        ShapeFamily::Star,
        ShapeFamily::LShape,
        ShapeFamily::HalfDisk,
    ];

    /// Membership test in the shape's unit frame.
    fn contains(self, u: f64, v: f64) -> bool {
        let rho = (u * u + v * v).sqrt();
        match self {
            ShapeFamily::Disk => rho <= 0.85,
            ShapeFamily::Square => u.abs().max(v.abs()) <= 0.72,
            ShapeFamily::Triangle => in_regular_polygon(u, v, 3, 1.0),
            ShapeFamily::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0)
            }
            ShapeFamily::Ring => (0.55..=1.0).contains(&rho),
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeFamily::Pentagon => in_regular_polygon(u, v, 5, 0.9),
            ShapeFamily::Star => {
                let a = v.atan2(u).rem_euclid(2.0 * PI / 5.0) - PI / 5.0;
                rho <= 0.45 + 0.55 * (1.0 - a.abs() / (PI / 5.0))
            }
            ShapeFamily::LShape => {
                let bottom = (-0.8..=0.8).contains(&u) && (-0.8..=-0.3).contains(&v);
                let left = (-0.8..=-0.3).contains(&u) && (-0.8..=0.8).contains(&v);
                bottom || left
            }
            ShapeFamily::HalfDisk => rho <= 0.95 && v >= -0.2,
        }
    }
}

fn in_regular_polygon(u: f64, v: f64, sides: usize, radius: f64) -> bool {
    // Inside iff the projection on every edge normal is within the apothem.
    let apothem = radius * (PI / sides as f64).cos();
    (0..sides).all(|k| {
        let a = 2.0 * PI * (k as f64 + 0.5) / sides as f64 + PI / 2.0;
        u * a.cos() + v * a.sin() <= apothem
    })
}

/// Rendering parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Background level in `[-1,1]`.
    pub background: f64,
    /// Object level in `[-1,1]`.
    pub foreground: f64,
    /// Per-image jitter of both levels.
    pub level_jitter: f64,
    /// `false` collapses all channels to one gray value.
    pub color: bool,
    /// Strength of the per-image random tint when `color` is set.
    pub tint: f64,
    /// Amplitude of the background stripe texture.
    pub texture: f64,
    /// Amplitude of the linear background gradient.
    pub gradient: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl DomainStyle {
    /// Bright gray object on a dark, blurred, noisy background.
    pub fn thermal() -> Self {
        Self {
            background: -0.7,
            foreground: 0.7,
            level_jitter: 0.1,
            color: false,
            tint: 0.0,
            texture: 0.0,
            gradient: 0.15,
            blur_radius: 1,
            noise: 0.06,
        }
    }

    /// Dark colored object on a bright textured background.
    pub fn visible() -> Self {
        Self {
            background: 0.55,
            foreground: -0.45,
            level_jitter: 0.1,
            color: true,
            tint: 0.35,
            texture: 0.2,
            gradient: 0.05,
            blur_radius: 0,
            noise: 0.03,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [
            self.background,
            self.foreground,
            self.level_jitter,
            self.tint,
            self.texture,
            self.gradient,
            self.noise,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.noise < 0.0 || self.level_jitter < 0.0 {
            return Err(Error::Config("domain style values must be finite, noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Shape of each class; the first `n_classes` entries are used.
    pub shapes: Vec<ShapeFamily>,
    pub images_per_class: usize,
    pub image_size: usize,
    pub domain_a_style: DomainStyle,
    pub domain_b_style: DomainStyle,
    /// Train/val/test percentages.
    pub split: [usize; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            shapes: ShapeFamily::ALL.to_vec(),
            images_per_class: 500,
            image_size: 32,
            domain_a_style: DomainStyle::visible(),
            domain_b_style: DomainStyle::thermal(),
            split: [70, 15, 15],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > self.shapes.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 2..={}",
                self.shapes.len()
            )));
        }
        let mut fams = self.shapes[..self.n_classes].to_vec();
        fams.sort();
        fams.dedup();
        if fams.len() != self.n_classes {
            return Err(Error::Config("class shapes must be distinct".into()));
        }
        if self.split.iter().sum::<usize>() != 100 {
            return Err(Error::Config("split ratios must sum to 100".into()));
        }
        if self.images_per_class == 0 || self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(
                "images_per_class must be positive and image_size a multiple of 4 (>= 8)".into(),
            ));
        }
        self.domain_a_style.validate()?;
        self.domain_b_style.validate()
    }

    pub fn hash(&self) -> String {
        crate::io::sha256_json(self)
    }

    pub fn style(&self, d: Domain) -> &DomainStyle {
        match d {
            Domain::A => &self.domain_a_style,
            Domain::B => &self.domain_b_style,
        }
    }

    /// Per-class `(train, val, test)` counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.images_per_class;
        let train = (n * self.split[0] + 50) / 100;
        let val = ((n * self.split[1] + 50) / 100).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::A => "a",
            Domain::B => "b",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Images of one domain and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    /// `[N,3,S,S]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
    /// Pose seed of every item; doubles as its latent item id.
    pub pose_seeds: Vec<u64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let img = self.images.narrow_rows(i, 1)?;
        let shape = img.shape()[1..].to_vec();
        Ok(img.reshape(&shape)?)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardSidecar {
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
    pub spec_hash: String,
    pub pose_seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub shards: Vec<Shard>,
}

impl Dataset {
    pub fn shard(&self, domain: Domain, split: Split) -> &Shard {
        self.shards
            .iter()
            .find(|s| s.domain == domain && s.split == split)
            .expect("every domain/split shard is generated")
    }

    pub fn total_images(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    fn stem(domain: Domain, split: Split) -> String {
        format!("{}_{}", domain.name(), split.name())
    }

    /// Writes `<domain>_<split>.tnsr` and `.json` per shard; returns the paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = self.spec.hash();
        let mut written = Vec::new();
        for s in &self.shards {
            let stem = Self::stem(s.domain, s.split);
            let tp = dir.join(format!("{stem}.tnsr"));
            tnsr::save(&tp, &s.images)?;
            let side = ShardSidecar {
                labels: s.labels.clone(),
                domain: s.domain,
                split: s.split,
                seed: s.seed,
                spec_hash: hash.clone(),
                pose_seeds: s.pose_seeds.clone(),
            };
            let jp = dir.join(format!("{stem}.json"));
            crate::io::write_json(&jp, &side)?;
            written.push(tp);
            written.push(jp);
        }
        Ok(written)
    }

    pub fn load(dir: &Path, spec: DatasetSpec, seed: u64) -> Result<Self> {
        let hash = spec.hash();
        let mut shards = Vec::new();
        for domain in [Domain::A, Domain::B] {
            for split in Split::ALL {
                let stem = Self::stem(domain, split);
                let side: ShardSidecar = crate::io::read_json(&dir.join(format!("{stem}.json")))?;
                if side.spec_hash != hash {
                    return Err(invalid(format!("shard {stem} was generated from a different spec")));
                }
                let images = tnsr::load(dir.join(format!("{stem}.tnsr")))?;
                if images.shape().first() != Some(&side.labels.len()) {
                    return Err(invalid(format!("shard {stem}: image and label counts differ")));
                }
                shards.push(Shard {
                    images,
                    labels: side.labels,
                    domain,
                    split,
                    seed: side.seed,
                    pose_seeds: side.pose_seeds,
                });
            }
        }
        Ok(Self { spec, seed, shards })
    }
}

/// SplitMix64 finalizer.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Pose seed of item `k` of `class` in `domain`.
pub fn pose_seed(seed: u64, domain: Domain, class: usize, k: usize) -> u64 {
    let d = match domain {
        Domain::A => 0xa,
        Domain::B => 0xb,
    };
    splitmix(splitmix(splitmix(seed ^ d) ^ class as u64) ^ k as u64)
}

fn box_blur(plane: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let s = size as isize;
    let clamp = |v: isize| v.clamp(0, s - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let sum: f64 = (-r..=r).map(|d| plane[y * size + clamp(x as isize + d)]).sum();
            tmp[y * size + x] = sum / (2 * r + 1) as f64;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let sum: f64 = (-r..=r).map(|d| tmp[clamp(y as isize + d) * size + x]).sum();
            plane[y * size + x] = sum / (2 * r + 1) as f64;
        }
    }
}

/// Renders one `[3,S,S]` image with values in `[-1,1]`.
pub fn render_item(
    shape: ShapeFamily,
    pose_seed: u64,
    style: &DomainStyle,
    size: usize,
) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
    let s = size as f64;
    let cx = s * rng.random_range(0.38..0.62);
    let cy = s * rng.random_range(0.38..0.62);
    let radius = s * rng.random_range(0.22..0.32);
    let angle = rng.random_range(0.0..2.0 * PI);
    let bg = style.background + style.level_jitter * rng.random_range(-1.0..1.0);
    let fg = style.foreground + style.level_jitter * rng.random_range(-1.0..1.0);
    let tint_fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let tint_bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let stripe_angle = rng.random_range(0.0..PI);
    let stripe_freq = rng.random_range(0.5..1.2);
    let stripe_phase = rng.random_range(0.0..2.0 * PI);
    let grad_angle = rng.random_range(0.0..2.0 * PI);

    // Coverage with 2×2 supersampling.
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut cover = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (dx, dy) = ((px as f64 + ox - cx) / radius, (py as f64 + oy - cy) / radius);
                let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                if shape.contains(u, v) {
                    hits += 1;
                }
            }
            cover[py * size + px] = hits as f64 / 4.0;
        }
    }

    let (ga, gb) = (grad_angle.cos(), grad_angle.sin());
    let (st_c, st_s) = (stripe_angle.cos(), stripe_angle.sin());
    let mut planes = vec![vec![0.0; size * size]; 3];
    for (ch, plane) in planes.iter_mut().enumerate() {
        let (tf, tb) = if style.color {
            (style.tint * tint_fg[ch], style.tint * tint_bg[ch])
        } else {
            (0.0, 0.0)
        };
        for py in 0..size {
            for px in 0..size {
                let (x, y) = (px as f64 / s - 0.5, py as f64 / s - 0.5);
                let stripe = (stripe_freq * (st_c * px as f64 + st_s * py as f64) + stripe_phase).sin();
                let back = bg + tb + style.gradient * 2.0 * (ga * x + gb * y) + style.texture * stripe;
                let c = cover[py * size + px];
                plane[py * size + px] = c * (fg + tf) + (1.0 - c) * back;
            }
        }
        box_blur(plane, size, style.blur_radius);
    }
    if !style.color {
        let gray: Vec<f64> = (0..size * size)
            .map(|i| (planes[0][i] + planes[1][i] + planes[2][i]) / 3.0)
            .collect();
        for p in planes.iter_mut() {
            p.clone_from(&gray);
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for p in &planes {
        for &v in p {
            let n: f64 = rng.sample(StandardNormal);
            data.push(v + style.noise * n);
        }
    }
    // Gray images keep the first channel's noise field on every channel.
    if !style.color {
        let plane = size * size;
        let (first, rest) = data.split_at_mut(plane);
        for chunk in rest.chunks_mut(plane) {
            chunk.copy_from_slice(first);
        }
    }
    Tensor::from_fn(&[3, size, size], |i| data[i].clamp(-1.0, 1.0) as f32)
}

/// Renders every domain × split shard.
///
/// Items are assigned to splits per class in index order, so the split
/// counts per class are exact and item ids never repeat across splits.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (n_train, n_val, _) = spec.split_counts();
    let size = spec.image_size;
    let mut shards = Vec::new();
    for domain in [Domain::A, Domain::B] {
        let style = spec.style(domain);
        let mut per_split: Vec<(Vec<Tensor>, Vec<usize>, Vec<u64>)> =
            (0..3).map(|_| (Vec::new(), Vec::new(), Vec::new())).collect();
        for class in 0..spec.n_classes {
            for k in 0..spec.images_per_class {
                let split = if k < n_train {
                    0
                } else if k < n_train + n_val {
                    1
                } else {
                    2
                };
                let ps = pose_seed(seed, domain, class, k);
                let img = render_item(spec.shapes[class], ps, style, size);
                let slot = &mut per_split[split];
                slot.0.push(img.reshape(&[1, 3, size, size])?);
                slot.1.push(class);
                slot.2.push(ps);
            }
        }
        for (split, (imgs, labels, seeds)) in Split::ALL.into_iter().zip(per_split) {
            let images = if imgs.is_empty() {
                Tensor::zeros(&[0, 3, size, size])
            } else {
                Tensor::stack_rows(&imgs)?
            };
            shards.push(Shard {
                images,
                labels,
                domain,
                split,
                seed,
                pose_seeds: seeds,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        shards,
    })
}

/// Accuracy of a trained classifier on each domain's test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub gap: f64,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Source-test minus target-test accuracy of a classifier applied raw.
pub fn domain_gap_probe(classifier: &Classifier, source_test: &Shard, target_test: &Shard) -> Result<GapReport> {
    if source_test.is_empty() || target_test.is_empty() {
        return Err(invalid("gap probe needs non-empty test shards"));
    }
    let s = accuracy(&classifier.predict(&source_test.images)?, &source_test.labels);
    let t = accuracy(&classifier.predict(&target_test.images)?, &target_test.labels);
    Ok(GapReport {
        source_accuracy: s,
        target_accuracy: t,
        gap: s - t,
    })
}
