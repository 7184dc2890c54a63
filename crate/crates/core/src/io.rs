//! Serialization helpers: JSON, hashes, PPM/PGM images, metrics CSV and the
//! run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttl_tensor::Tensor;

use crate::error::{invalid, Error, Result};
use crate::objectives::{LossReport, Term};

/// SHA-256 of the compact JSON encoding of `value`.
pub fn sha256_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// `[-1,1]` to a byte: `floor((v+1)·127.5 + 0.5)`, clamped.
pub fn to_pixel(v: f32) -> u8 {
    let p = ((v as f64 + 1.0) * 127.5 + 0.5).floor();
    p.clamp(0.0, 255.0) as u8
}

/// Binary P6 bytes of a `[3,H,W]` image.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(invalid(format!("ppm needs a [3,H,W] image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_pixel(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Binary P5 bytes of a `[1,H,W]` or `[H,W]` image.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(invalid(format!("pgm needs a [1,H,W] or [H,W] image, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_pixel(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary P6 file into `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid(format!("ppm header truncated at byte {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(invalid("not a binary 8-bit ppm"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad ppm dimension `{s}`")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 3 {
        return Err(invalid(format!(
            "ppm body has {} bytes, expected {}",
            body.len(),
            w * h * 3
        )));
    }
    Ok((w, h, body.to_vec()))
}

/// Lays `[3,H,W]` images side by side, separated by white gutters.
pub fn panel(images: &[Tensor], gutter: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("panel of no images"))?;
    let &[3, h, w] = first.shape() else {
        return Err(invalid(format!("panel needs [3,H,W] images, got {:?}", first.shape())));
    };
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(invalid("panel images differ in shape"));
    }
    let n = images.len();
    let pw = n * w + (n - 1) * gutter;
    let mut out = Tensor::full(&[3, h, pw], 1.0);
    let od = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        let x0 = k * (w + gutter);
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * h + y) * pw + x0;
                od[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

pub const METRICS_HEADER: &str =
    "epoch,iter,gan,cycle,identity,nce1,nce2,nce3,nce4,ce_src,ce_tgt,total,lr,lambda_ce";

/// One logged training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub report: LossReport,
    pub lr: f64,
    pub lambda_ce: f64,
}

impl MetricsRow {
    /// CSV line without the trailing newline; absent parts are empty fields.
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{}", self.report.epoch, self.report.iteration);
        for t in Term::ALL {
            s.push(',');
            if let Some(v) = self.report.get(t) {
                let _ = write!(s, "{v}");
            }
        }
        let _ = write!(s, ",{},{},{}", self.report.total, self.lr, self.lambda_ce);
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_ce: f64,
    pub iterations: usize,
    pub discriminator_updates: usize,
    /// Mean of the iteration reports of this epoch.
    pub mean_loss: LossReport,
    /// Target-classifier accuracy on the target validation split.
    pub target_val_accuracy: f64,
}

/// Reproducibility record of a run. Contains no timestamps or host data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub status: String,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<String>,
    pub evaluation: std::collections::BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::json("<config>", e))?;
        Ok(Self {
            seed,
            config_hash: sha256_json(&config),
            config,
            status: "running".into(),
            epochs: Vec::new(),
            checkpoints: Vec::new(),
            evaluation: Default::default(),
        })
    }

    /// Whether the stored hash matches a fresh hash of the stored config.
    pub fn hash_is_consistent(&self) -> bool {
        sha256_json(&self.config) == self.config_hash
    }
}
