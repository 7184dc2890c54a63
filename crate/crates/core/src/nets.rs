//! Generator, patch discriminator, classifier and projection heads.
//!
//! Every network owns a [`ParamSet`] and exposes graph-level forwards that take
//! a [`Bound`] copy of its parameters, so the same weights can enter a graph as
//! trainable leaves or as frozen constants.

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttl_tensor::{Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};
use crate::params::{Bound, ParamSet};

pub const IN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Number of encoder taps exposed by the generator.
pub const NUM_TAPS: usize = 5;
/// Rows with a smaller norm are not rescaled up by the projection heads.
pub const NORM_FLOOR: f64 = 1e-12;

/// Architecture sizes shared by every network in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Width of the generator stem; the encoder doubles it twice.
    pub gen_channels: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    /// Penultimate classifier width.
    pub feature_dim: usize,
    /// Projection head output width.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            gen_channels: 8,
            res_blocks: 4,
            disc_channels: 8,
            feature_dim: 16,
            embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0
            || self.gen_channels == 0
            || self.disc_channels == 0
            || self.feature_dim < 2
            || self.embed_dim == 0
        {
            return Err(crate::Error::Config("model widths must be positive".into()));
        }
        if self.res_blocks < 2 {
            return Err(crate::Error::Config("res_blocks must be at least 2".into()));
        }
        Ok(())
    }
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, w, stride, pad)?;
    Ok(match bias {
        Some(b) => g.add_bias(y, b, 1)?,
        None => y,
    })
}

fn in_relu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.instance_norm(x, IN_EPS)?;
    Ok(g.relu(n))
}

fn batch_of<T: Real>(g: &Graph<T>, x: Var, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[n, c, h, w] if c == channels && n > 0 => Ok((n, h, w)),
        s => Err(invalid(format!(
            "{what} expects [N,{channels},H,W], got {s:?}"
        ))),
    }
}

/// Adds a leading batch axis to a `[C,H,W]` image.
fn as_batch<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    Ok(img.clone().reshape(&shape)?)
}

fn drop_batch<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(t.clone().reshape(&t.shape()[1..])?)
}

/// Encoder–decoder translator with residual blocks.
///
/// Encoder: 3×3 stem, two stride-2 downsamplers, `R` residual blocks.
/// Decoder: two stride-2 transposed convolutions and a tanh head.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Real = f32> {
    pub params: ParamSet<T>,
    channels: usize,
    width: usize,
    res_blocks: usize,
}

// Parameter layout: stem, down1, down2, 2 per block, up1, up2, head_w, head_b.
const G_STEM: usize = 0;
const G_DOWN1: usize = 1;
const G_DOWN2: usize = 2;
const G_RES: usize = 3;

impl<T: Real> Generator<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, w) = (cfg.image_channels, cfg.gen_channels);
        let mut p = ParamSet::new();
        p.push_kaiming("stem.w", &[w, c, 3, 3], c * 9, rng);
        p.push_kaiming("down1.w", &[2 * w, w, 3, 3], w * 9, rng);
        p.push_kaiming("down2.w", &[4 * w, 2 * w, 3, 3], 2 * w * 9, rng);
        for b in 0..cfg.res_blocks {
            p.push_kaiming(format!("res{b}.w1"), &[4 * w, 4 * w, 3, 3], 4 * w * 9, rng);
            p.push_kaiming(format!("res{b}.w2"), &[4 * w, 4 * w, 3, 3], 4 * w * 9, rng);
        }
        p.push_kaiming("up1.w", &[4 * w, 2 * w, 3, 3], 2 * w * 9, rng);
        p.push_kaiming("up2.w", &[2 * w, w, 3, 3], w * 9, rng);
        p.push_kaiming("head.w", &[c, w, 3, 3], w * 9, rng);
        p.push_zeros("head.b", &[c]);
        Ok(Self {
            params: p,
            channels: c,
            width: w,
            res_blocks: cfg.res_blocks,
        })
    }

    /// Channel count of each encoder tap.
    pub fn tap_channels(&self) -> [usize; NUM_TAPS] {
        let w = self.width;
        [w, 2 * w, 4 * w, 4 * w, 4 * w]
    }

    /// Runs the encoder up to the deepest tap in `layer_ids`.
    ///
    /// Taps: 0 stem, 1 down1, 2 down2, 3 residual block `R/2` (rounded down), 4 last block.
    pub fn encode(&self, g: &mut Graph<T>, b: &Bound, x: Var, layer_ids: &[usize]) -> Result<Vec<Var>> {
        if let Some(&bad) = layer_ids.iter().find(|&&l| l >= NUM_TAPS) {
            return Err(invalid(format!("encoder tap {bad} out of range 0..{NUM_TAPS}")));
        }
        let deepest = layer_ids.iter().copied().max().unwrap_or(0);
        let taps = self.encode_all(g, b, x, deepest)?;
        Ok(layer_ids.iter().map(|&l| taps[l]).collect())
    }

    fn encode_all(&self, g: &mut Graph<T>, b: &Bound, x: Var, deepest: usize) -> Result<Vec<Var>> {
        let (_, h, w) = batch_of(g, x, self.channels, "generator")?;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(invalid(format!(
                "generator input spatial dims {h}×{w} must be divisible by 4"
            )));
        }
        let mut taps = Vec::with_capacity(NUM_TAPS);
        let s = conv(g, x, b.get(G_STEM), None, 1, 1)?;
        let mut h = in_relu(g, s)?;
        taps.push(h);
        for (i, idx) in [G_DOWN1, G_DOWN2].into_iter().enumerate() {
            if deepest < i + 1 {
                return Ok(taps);
            }
            let d = conv(g, h, b.get(idx), None, 2, 1)?;
            h = in_relu(g, d)?;
            taps.push(h);
        }
        if deepest < 3 {
            return Ok(taps);
        }
        for blk in 0..self.res_blocks {
            let c1 = conv(g, h, b.get(G_RES + 2 * blk), None, 1, 1)?;
            let r = in_relu(g, c1)?;
            let c2 = conv(g, r, b.get(G_RES + 2 * blk + 1), None, 1, 1)?;
            let n = g.instance_norm(c2, IN_EPS)?;
            h = g.add(h, n)?;
            if blk + 1 == self.res_blocks / 2 {
                taps.push(h);
                if deepest < 4 {
                    return Ok(taps);
                }
            }
        }
        taps.push(h);
        Ok(taps)
    }

    /// Decodes the deepest encoder tap into an image.
    pub fn decode(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
        let up = G_RES + 2 * self.res_blocks;
        let u1 = g.conv_transpose2d(z, b.get(up), 2, 1, 1)?;
        let u1 = in_relu(g, u1)?;
        let u2 = g.conv_transpose2d(u1, b.get(up + 1), 2, 1, 1)?;
        let u2 = in_relu(g, u2)?;
        let o = conv(g, u2, b.get(up + 2), Some(b.get(up + 3)), 1, 1)?;
        Ok(g.tanh(o))
    }

    /// Batched translation returning the output and all five encoder taps.
    pub fn forward_with_taps(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let taps = self.encode_all(g, b, x, NUM_TAPS - 1)?;
        let out = self.decode(g, b, taps[NUM_TAPS - 1])?;
        Ok((out, taps))
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_taps(g, b, x)?.0)
    }

    /// Translates a batch outside any training graph.
    pub fn translate(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }

    /// Translates one `[C,H,W]` image.
    pub fn generator_forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        drop_batch(&self.translate(&as_batch(img)?)?)
    }

    /// Encoder feature maps `[C_l,H_l,W_l]` of one image, ordered as `layer_ids`.
    pub fn encoder_features(&self, img: &Tensor<T>, layer_ids: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(as_batch(img)?);
        let taps = self.encode(&mut g, &b, x, layer_ids)?;
        taps.into_iter().map(|t| drop_batch(g.value(t))).collect()
    }
}

/// Patch discriminator: two stride-2 4×4 convolutions and a 3×3 logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Real = f32> {
    pub params: ParamSet<T>,
    channels: usize,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, w) = (cfg.image_channels, cfg.disc_channels);
        let mut p = ParamSet::new();
        p.push_kaiming("c1.w", &[w, c, 4, 4], c * 16, rng);
        p.push_zeros("c1.b", &[w]);
        p.push_kaiming("c2.w", &[2 * w, w, 4, 4], w * 16, rng);
        p.push_kaiming("out.w", &[1, 2 * w, 3, 3], 2 * w * 9, rng);
        p.push_zeros("out.b", &[1]);
        Ok(Self { params: p, channels: c })
    }

    /// Number of stride-2 stages; the logit map is `H / 2^k` on each side.
    pub const STAGES: u32 = 2;

    /// Logit map `[N,1,H/4,W/4]`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let (_, h, w) = batch_of(g, x, self.channels, "discriminator")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(invalid(format!("discriminator input {h}×{w} not divisible by 4")));
        }
        let h1 = conv(g, x, b.get(0), Some(b.get(1)), 2, 1)?;
        let h1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = conv(g, h1, b.get(2), None, 2, 1)?;
        let h2 = g.instance_norm(h2, IN_EPS)?;
        let h2 = g.leaky_relu(h2, LEAKY_SLOPE);
        conv(g, h2, b.get(3), Some(b.get(4)), 1, 1)
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}

/// Small CNN: four 3×3 conv blocks with one additive skip, global average
/// pooling to `feature_dim` features and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Real = f32> {
    pub params: ParamSet<T>,
    channels: usize,
    n_classes: usize,
    feature_dim: usize,
}

/// Classifier outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierPass {
    /// `[N,C]`
    pub logits: Var,
    /// `[N,feature_dim]`
    pub features: Var,
}

impl<T: Real> Classifier<T> {
    pub fn new(cfg: &ModelConfig, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(invalid("classifier needs at least 2 classes"));
        }
        let (c, f) = (cfg.image_channels, cfg.feature_dim);
        let h = f / 2;
        let mut p = ParamSet::new();
        p.push_kaiming("b1.w", &[h, c, 3, 3], c * 9, rng);
        p.push_zeros("b1.b", &[h]);
        p.push_kaiming("b2.w", &[f, h, 3, 3], h * 9, rng);
        p.push_zeros("b2.b", &[f]);
        p.push_kaiming("b3.w", &[f, f, 3, 3], f * 9, rng);
        p.push_zeros("b3.b", &[f]);
        p.push_kaiming("b4.w", &[f, f, 3, 3], f * 9, rng);
        p.push_zeros("b4.b", &[f]);
        p.push_kaiming("fc.w", &[f, n_classes], f, rng);
        p.push_zeros("fc.b", &[n_classes]);
        Ok(Self {
            params: p,
            channels: c,
            n_classes,
            feature_dim: f,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<ClassifierPass> {
        batch_of(g, x, self.channels, "classifier")?;
        let h1 = conv(g, x, b.get(0), Some(b.get(1)), 2, 1)?;
        let h1 = g.relu(h1);
        let h2 = conv(g, h1, b.get(2), Some(b.get(3)), 2, 1)?;
        let h2 = g.relu(h2);
        let h3 = conv(g, h2, b.get(4), Some(b.get(5)), 1, 1)?;
        let h3 = g.add(h3, h2)?;
        let h3 = g.relu(h3);
        let h4 = conv(g, h3, b.get(6), Some(b.get(7)), 1, 1)?;
        let h4 = g.relu(h4);
        let features = g.mean_spatial(h4)?;
        let l = g.matmul(features, b.get(8))?;
        let logits = g.add_bias(l, b.get(9), 1)?;
        Ok(ClassifierPass { logits, features })
    }

    /// Logits `[N,C]` and penultimate features `[N,feature_dim]` for a batch,
    /// evaluated in chunks to bound memory.
    pub fn evaluate(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        const CHUNK: usize = 128;
        let n = images.shape()[0];
        let (mut logits, mut feats) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let x = g.constant(images.narrow_rows(start, len)?);
            let pass = self.forward(&mut g, &b, x)?;
            logits.push(g.value(pass.logits).clone());
            feats.push(g.value(pass.features).clone());
            start += len;
        }
        if logits.is_empty() {
            return Ok((
                Tensor::zeros(&[0, self.n_classes]),
                Tensor::zeros(&[0, self.feature_dim]),
            ));
        }
        Ok((Tensor::stack_rows(&logits)?, Tensor::stack_rows(&feats)?))
    }

    /// Logits `[C]` and features `[feature_dim]` of one `[C,H,W]` image.
    pub fn classifier_forward(&self, img: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (l, f) = self.evaluate(&as_batch(img)?)?;
        Ok((drop_batch(&l)?, drop_batch(&f)?))
    }

    /// Arg-max class per row of `[N,C]` logits; ties go to the lower index.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.evaluate(images)?.0))
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    let v = v.as_f64();
                    if v > best.1 { (i, v) } else { best }
                })
                .0
        })
        .collect()
}

/// Two-layer MLP projection heads, one per encoder tap.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHeads<T: Real = f32> {
    pub params: ParamSet<T>,
    in_channels: Vec<usize>,
    embed_dim: usize,
}

impl<T: Real> MlpHeads<T> {
    pub fn new(in_channels: &[usize], embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if embed_dim == 0 || in_channels.iter().any(|&c| c == 0) {
            return Err(invalid("projection head widths must be positive"));
        }
        let mut p = ParamSet::new();
        for (l, &c) in in_channels.iter().enumerate() {
            p.push_kaiming(format!("l{l}.w1"), &[c, embed_dim], c, rng);
            p.push_zeros(format!("l{l}.b1"), &[embed_dim]);
            p.push_kaiming(format!("l{l}.w2"), &[embed_dim, embed_dim], embed_dim, rng);
            p.push_zeros(format!("l{l}.b2"), &[embed_dim]);
        }
        Ok(Self {
            params: p,
            in_channels: in_channels.to_vec(),
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.in_channels.len()
    }

    /// Projects feature rows `[R,C_l]` of tap `layer` to unit-L2 rows `[R,E]`.
    pub fn project(&self, g: &mut Graph<T>, b: &Bound, layer: usize, rows: Var) -> Result<Var> {
        let c = *self
            .in_channels
            .get(layer)
            .ok_or_else(|| invalid(format!("no projection head for layer {layer}")))?;
        if g.shape(rows).len() != 2 || g.shape(rows)[1] != c {
            return Err(invalid(format!(
                "head {layer} expects rows of width {c}, got {:?}",
                g.shape(rows)
            )));
        }
        let base = 4 * layer;
        let h = g.matmul(rows, b.get(base))?;
        let h = g.add_bias(h, b.get(base + 1), 1)?;
        let h = g.relu(h);
        let o = g.matmul(h, b.get(base + 2))?;
        let o = g.add_bias(o, b.get(base + 3), 1)?;
        Ok(g.l2_normalize_rows_clamped(o, NORM_FLOOR)?)
    }

    /// Embeds the given spatial locations of one feature map per layer.
    ///
    /// `stack[l]` is `[C_l,H_l,W_l]`; `locations[l]` indexes `H_l·W_l`.
    pub fn mlp_project(&self, stack: &[Tensor<T>], locations: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
        if stack.len() != locations.len() || stack.len() > self.in_channels.len() {
            return Err(invalid("feature stack and location lists differ in length"));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut out = Vec::with_capacity(stack.len());
        for (l, (fm, locs)) in stack.iter().zip(locations).enumerate() {
            let x = g.constant(as_batch(fm)?);
            let rows = g.nchw_to_rows(x)?;
            let hw = g.shape(rows)[0];
            if let Some(&bad) = locs.iter().find(|&&i| i >= hw) {
                return Err(invalid(format!("location {bad} out of range for layer {l} ({hw} cells)")));
            }
            let picked = g.gather_rows(rows, locs)?;
            let e = self.project(&mut g, &b, l, picked)?;
            out.push(g.value(e).clone());
        }
        Ok(out)
    }
}
