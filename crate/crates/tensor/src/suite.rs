//! Finite-difference checks for every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

/// Step used by the suites; small enough to avoid straddling relu kinks on
/// random inputs, large enough that 64-bit round-off stays near 1e-11.
pub const SUITE_EPS: f64 = 1e-5;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduce an arbitrary-shaped output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Vec<usize>>, (f64, f64), fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn cases() -> Vec<Case> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, x| g.mul(x[0], x[1])),
        ("scalar-mul", vec![vec![5]], (-1.0, 1.0), |g, x| Ok(g.scale(x[0], -1.7))),
        ("add-scalar", vec![vec![5]], (-1.0, 1.0), |g, x| Ok(g.add_scalar(x[0], 0.3))),
        ("add-bias", vec![vec![2, 3, 2, 2], vec![3]], (-1.0, 1.0), |g, x| g.add_bias(x[0], x[1], 1)),
        ("matmul", vec![vec![3, 5], vec![5, 4]], (-1.0, 1.0), |g, x| g.matmul(x[0], x[1])),
        ("conv2d", vec![vec![2, 2, 6, 5], vec![3, 2, 3, 3]], (-1.0, 1.0), |g, x| {
            g.conv2d(x[0], x[1], 1, 1)
        }),
        ("conv2d-stride2", vec![vec![1, 2, 7, 6], vec![2, 2, 4, 4]], (-1.0, 1.0), |g, x| {
            g.conv2d(x[0], x[1], 2, 1)
        }),
        ("transposed-conv2d", vec![vec![2, 3, 3, 4], vec![3, 2, 3, 3]], (-1.0, 1.0), |g, x| {
            g.conv_transpose2d(x[0], x[1], 2, 1, 1)
        }),
        ("relu", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.relu(x[0]))),
        ("leaky-relu", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.leaky_relu(x[0], 0.2))),
        ("tanh", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.tanh(x[0]))),
        ("sigmoid", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.sigmoid(x[0]))),
        ("exp", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.exp(x[0]))),
        ("log", vec![vec![4, 6]], (0.5, 1.5), |g, x| g.log(x[0])),
        ("abs", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.abs(x[0]))),
        ("clamp", vec![vec![4, 6]], (-1.0, 1.0), |g, x| Ok(g.clamp(x[0], -0.5, 0.5))),
        ("softmax-rows", vec![vec![3, 8]], (-1.0, 1.0), |g, x| g.softmax_rows(x[0])),
        ("log-softmax-rows", vec![vec![3, 8]], (-1.0, 1.0), |g, x| g.log_softmax_rows(x[0])),
        ("sum", vec![vec![3, 4]], (-1.0, 1.0), |g, x| {
            let s = g.sum(x[0]);
            Ok(g.tanh(s))
        }),
        ("mean", vec![vec![3, 4]], (-1.0, 1.0), |g, x| {
            let s = g.mean(x[0])?;
            Ok(g.tanh(s))
        }),
        ("l1-norm", vec![vec![3, 4]], (-1.0, 1.0), |g, x| {
            let s = g.l1_norm(x[0]);
            Ok(g.tanh(s))
        }),
        ("l2-normalize-rows", vec![vec![4, 5]], (-1.0, 1.0), |g, x| g.l2_normalize_rows(x[0])),
        ("l2-normalize-rows-clamped", vec![vec![4, 5]], (-1.0, 1.0), |g, x| {
            g.l2_normalize_rows_clamped(x[0], 1e-12)
        }),
        ("l2-normalize-rows-clamp-active", vec![vec![4, 5]], (-1.0, 1.0), |g, x| {
            g.l2_normalize_rows_clamped(x[0], 10.0)
        }),
        ("reshape", vec![vec![3, 4]], (-1.0, 1.0), |g, x| {
            let r = g.reshape(x[0], &[2, 6])?;
            Ok(g.tanh(r))
        }),
        ("transpose", vec![vec![3, 5]], (-1.0, 1.0), |g, x| g.transpose(x[0])),
        ("slice", vec![vec![3, 6, 2]], (-1.0, 1.0), |g, x| g.slice(x[0], 1, 2, 3)),
        ("concat", vec![vec![2, 3], vec![2, 4]], (-1.0, 1.0), |g, x| g.concat(&[x[0], x[1]], 1)),
        ("instance-norm", vec![vec![2, 3, 4, 4]], (-1.0, 1.0), |g, x| g.instance_norm(x[0], 1e-5)),
        ("gather-rows", vec![vec![5, 3]], (-1.0, 1.0), |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])),
        ("rowwise-dot", vec![vec![3, 4], vec![3, 5, 4]], (-1.0, 1.0), |g, x| g.rowwise_dot(x[0], x[1])),
        ("pick-cols", vec![vec![3, 4]], (-1.0, 1.0), |g, x| g.pick_cols(x[0], &[3, 0, 1])),
        ("nchw-to-rows", vec![vec![2, 3, 2, 3]], (-1.0, 1.0), |g, x| g.nchw_to_rows(x[0])),
        ("mean-spatial", vec![vec![2, 3, 3, 3]], (-1.0, 1.0), |g, x| g.mean_spatial(x[0])),
    ]
}

/// Gradient-check every primitive on random inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (name, shapes, (lo, hi), f)) in cases().into_iter().enumerate() {
        let points: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect();
        let salt = seed.wrapping_add(i as u64);
        let err = grad_check_many(
            |g, xs| {
                let y = f(g, xs)?;
                if g.shape(y).iter().product::<usize>() == 1 && g.shape(y).len() <= 1 {
                    Ok(y)
                } else {
                    project(g, y, salt)
                }
            },
            &points,
            SUITE_EPS,
            None,
        )?;
        out.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: err,
        });
    }
    Ok(out)
}
