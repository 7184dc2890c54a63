use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `point`
/// and a central finite difference with step `eps`, all in 64-bit.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), eps, None)
}

/// Multi-input variant. With `max_coords`, only that many evenly spaced
/// coordinates of each input are probed.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let eval = |pts: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (g, vars, y) = eval(points)?;
    let grads = g.backward(y)?;

    let mut worst: f64 = 0.0;
    let mut offset = 0;
    let mut pts = points.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let n = points[t].len();
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let step = match max_coords {
            Some(m) if m > 0 && m < n => n / m,
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = pts[t].data()[i];
            pts[t].data_mut()[i] = orig + eps;
            let (gp, _, yp) = eval(&pts)?;
            pts[t].data_mut()[i] = orig - eps;
            let (gm, _, ym) = eval(&pts)?;
            pts[t].data_mut()[i] = orig;
            let (fp, fm) = (gp.scalar_value(yp), gm.scalar_value(ym));
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite { index: offset + i });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        offset += n;
    }
    Ok(worst)
}
