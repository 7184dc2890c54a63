//! Multi-layer contrastive loss between a translator's input and output.
//!
//! Keys come from the encoder taps of the input image, queries from the same
//! encoder applied to the translated image. Both pass through the projection
//! head of their layer; keys are treated as constants. Shallow layers sample
//! random locations shared across the batch. With query selection enabled,
//! the deepest layer instead routes features through the low-entropy rows of
//! each input image's own attention matrix.

use rand::Rng;
use ttl_tensor::{Graph, Var};

use crate::contrastive::{augment_negatives, monce, monce_plan, patchnce, sample_patches, ContrastiveConfig, PatchBatch, PatchSelector};
use crate::error::{invalid, Result};
use crate::nets::{Generator, MlpHeads};
use crate::params::Bound;
use crate::qs_attention::{attention_matrix, select_queries};

/// Which parts of the contrastive loss are active.
#[derive(Clone, Debug)]
pub struct NceSettings<'a> {
    pub cfg: &'a ContrastiveConfig,
    /// Encoder taps, in projection-head order.
    pub layers: &'a [usize],
    pub query_selection: bool,
    pub nfm: bool,
    pub monce: bool,
    pub attention_cap: usize,
}

/// Encoder and head of one translator, bound into a graph.
pub struct Translator<'a> {
    pub generator: &'a Generator,
    pub generator_vars: &'a Bound,
    pub heads: &'a MlpHeads,
    pub head_vars: &'a Bound,
}

fn contrast(g: &mut Graph, q: Var, k: Var, layer: usize, locs: Vec<usize>, s: &NceSettings<'_>, rng: &mut impl Rng) -> Result<Var> {
    let k = g.detach(k);
    let mut batch = PatchBatch::new(g, q, k, layer, locs)?;
    if s.nfm {
        let mut nfm = s.cfg.nfm.clone();
        nfm.enabled = true;
        batch = augment_negatives(g, batch, &nfm, rng)?;
    }
    if s.monce {
        let plan = monce_plan(g, &batch, s.cfg)?;
        monce(g, &batch, &plan, s.cfg)
    } else {
        patchnce(g, &batch, s.cfg.tau)
    }
}

/// Mean contrastive loss over layers and images.
///
/// `source_taps` are all encoder taps of the input batch; `generated` is the
/// translated batch `[B,C,H,W]`.
pub fn nce_loss(
    g: &mut Graph,
    t: &Translator<'_>,
    source_taps: &[Var],
    generated: Var,
    s: &NceSettings<'_>,
    rng: &mut impl Rng,
) -> Result<Var> {
    if s.layers.iter().any(|&l| l >= source_taps.len()) {
        return Err(invalid("contrastive layer has no source tap"));
    }
    let n = s.cfg.n_patches;
    let q_taps = t.generator.encode(g, t.generator_vars, generated, s.layers)?;
    let qs_layer = if s.query_selection {
        s.layers.iter().copied().max()
    } else {
        None
    };
    let mut losses = Vec::new();
    for (li, (&layer, &q_tap)) in s.layers.iter().zip(&q_taps).enumerate() {
        let src = g.detach(source_taps[layer]);
        let shape = g.shape(src).to_vec();
        let (batch, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let src_rows = g.nchw_to_rows(src)?;
        let q_rows = g.nchw_to_rows(q_tap)?;
        if Some(layer) == qs_layer {
            for b in 0..batch {
                let fmap = g
                    .value(src)
                    .narrow_rows(b, 1)?
                    .reshape(&[c, shape[2], shape[3]])?;
                let ranking = select_queries(&attention_matrix(&fmap, s.attention_cap)?, n)?;
                let a = ranking.constant(g);
                let sk = g.slice(src_rows, 0, b * hw, hw)?;
                let sq = g.slice(q_rows, 0, b * hw, hw)?;
                let rk = g.matmul(a, sk)?;
                let rq = g.matmul(a, sq)?;
                let ke = t.heads.project(g, t.head_vars, li, rk)?;
                let qe = t.heads.project(g, t.head_vars, li, rq)?;
                losses.push(contrast(g, qe, ke, layer, ranking.selected, s, rng)?);
            }
        } else {
            let locs = sample_patches(&[hw], n, PatchSelector::Random(&mut *rng))?.remove(0);
            let idx: Vec<usize> = (0..batch)
                .flat_map(|b| locs.iter().map(move |&l| b * hw + l))
                .collect();
            let sk = g.gather_rows(src_rows, &idx)?;
            let sq = g.gather_rows(q_rows, &idx)?;
            let ke = t.heads.project(g, t.head_vars, li, sk)?;
            let qe = t.heads.project(g, t.head_vars, li, sq)?;
            for b in 0..batch {
                let kb = g.slice(ke, 0, b * n, n)?;
                let qb = g.slice(qe, 0, b * n, n)?;
                losses.push(contrast(g, qb, kb, layer, locs.clone(), s, rng)?);
            }
        }
    }
    let count = losses.len();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / count as f64))
}
