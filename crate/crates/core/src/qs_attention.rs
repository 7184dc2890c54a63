//! Entropy-ranked global attention used to choose contrastive query locations.

use nalgebra::DMatrix;
use ttl_tensor::{Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};

/// Largest `H·W` accepted by [`attention_matrix`] by default.
pub const DEFAULT_CAP: usize = 1024;

/// Row-stochastic `HW×HW` attention of a feature map onto itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub matrix: DMatrix<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Selected low-entropy rows of an [`AttentionMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRanking {
    pub entropy: Vec<f64>,
    pub selected: Vec<usize>,
    /// `N_q×HW` rows of the attention matrix, in `selected` order.
    pub a_qs: DMatrix<f64>,
    pub height: usize,
    pub width: usize,
}

/// `[C,H,W]` feature map to its `HW×C` row matrix.
fn spatial_rows<T: Real>(features: &Tensor<T>) -> Result<(DMatrix<f64>, usize, usize, usize)> {
    let &[c, h, w] = features.shape() else {
        return Err(invalid(format!("expected [C,H,W] features, got {:?}", features.shape())));
    };
    let hw = h * w;
    let d = features.data();
    Ok((DMatrix::from_fn(hw, c, |p, ch| d[ch * hw + p].as_f64()), c, h, w))
}

/// `softmax_rows(Q·Qᵀ)` with `Q` the `HW×C` reshape of `features`.
pub fn attention_matrix<T: Real>(features: &Tensor<T>, cap: usize) -> Result<AttentionMap> {
    let (q, c, h, w) = spatial_rows(features)?;
    if h * w > cap {
        return Err(invalid(format!(
            "global attention over {} locations needs cap >= {}, configured {cap}",
            h * w,
            h * w
        )));
    }
    let mut a = &q * q.transpose();
    for mut row in a.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(AttentionMap {
        matrix: a,
        height: h,
        width: w,
        channels: c,
    })
}

/// `-Σ_j a_ij ln a_ij` per row, with `0·ln 0 = 0`.
pub fn row_entropy(a: &AttentionMap) -> Vec<f64> {
    a.matrix
        .row_iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Indices of the `n_q` smallest entries; ties go to the lower index.
pub fn smallest_indices(h: &[f64], n_q: usize) -> Result<Vec<usize>> {
    if n_q > h.len() {
        return Err(invalid(format!("cannot select {n_q} of {} rows", h.len())));
    }
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    idx.truncate(n_q);
    Ok(idx)
}

/// Ranks rows of `a` by entropy and keeps the `n_q` most focused ones.
pub fn select_queries(a: &AttentionMap, n_q: usize) -> Result<EntropyRanking> {
    let entropy = row_entropy(a);
    let selected = smallest_indices(&entropy, n_q)?;
    let hw = a.matrix.ncols();
    let a_qs = DMatrix::from_fn(selected.len(), hw, |r, j| a.matrix[(selected[r], j)]);
    Ok(EntropyRanking {
        entropy,
        selected,
        a_qs,
        height: a.height,
        width: a.width,
    })
}

fn check_dims(ranking: &EntropyRanking, h: usize, w: usize) -> Result<()> {
    if (h, w) != (ranking.height, ranking.width) {
        return Err(invalid(format!(
            "value features are {h}×{w}, ranking was built on {}×{}",
            ranking.height, ranking.width
        )));
    }
    Ok(())
}

/// `A_QS · V` with `V` the `HW×C` reshape of `value_features`.
pub fn route_features<T: Real>(ranking: &EntropyRanking, value_features: &Tensor<T>) -> Result<DMatrix<f64>> {
    let (v, _, h, w) = spatial_rows(value_features)?;
    check_dims(ranking, h, w)?;
    Ok(&ranking.a_qs * v)
}

impl EntropyRanking {
    /// `A_QS` as a graph constant, to be shared by every routed operand.
    pub fn constant<T: Real>(&self, g: &mut Graph<T>) -> Var {
        let (r, c) = self.a_qs.shape();
        let t = Tensor::from_fn(&[r, c], |k| T::from_f64(self.a_qs[(k / c, k % c)]));
        g.constant(t)
    }
}

/// Graph form of [`route_features`]: `a_qs · rows` for `rows: [HW,C]`.
pub fn route_rows<T: Real>(g: &mut Graph<T>, ranking: &EntropyRanking, a_qs: Var, rows: Var) -> Result<Var> {
    let hw = ranking.height * ranking.width;
    if g.shape(rows).len() != 2 || g.shape(rows)[0] != hw {
        return Err(invalid(format!(
            "routed rows must be [{hw},C], got {:?}",
            g.shape(rows)
        )));
    }
    Ok(g.matmul(a_qs, rows)?)
}
