use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, b: Var, axis: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, batch: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    L2NormalizeRows { x: Var, norms: Vec<T>, clamped: Vec<bool> },
    Reshape(Var),
    Transpose(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    RowwiseDot { q: Var, s: Var },
    PickCols { x: Var, cols: Vec<usize> },
    NchwToRows(Var),
    MeanSpatial(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph that doubles as the autodiff tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. A graph is single-owner; build a fresh one per step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn bad_shape(op: &'static str, shape: &[usize], detail: impl Into<String>) -> TensorError {
    TensorError::BadShape {
        op,
        shape: shape.to_vec(),
        detail: detail.into(),
    }
}

fn last_axis(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&c) if c > 0 => Ok((shape.iter().product::<usize>() / c, c)),
        _ => Err(bad_shape(op, shape, "needs a non-empty last axis")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Constant, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        {
            if inputs.iter().all(|v| self.value(*v).is_finite()) {
                debug_assert!(
                    value.is_finite(),
                    "non-finite output from {:?} with finite inputs",
                    std::mem::discriminant(&op)
                );
            }
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], Op::AddScalar(a))
    }

    /// Adds `b` (length `shape[axis]`) broadcast over every other axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(mismatch("add_bias", &xs, bs));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let c = xs[axis];
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        Ok(self.push(out, &[x, b], Op::AddBias { x, b, axis }))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    /// Zero-padded convolution. `x: [N,Ci,H,W]`, `w: [Co,Ci,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)
            .ok_or_else(|| mismatch("conv2d", &xs, &ws))?;
        let (batch, co) = (xs[0], ws[0]);
        let (kr, ohw) = (geom.col_rows(), geom.col_cols());
        let chw = xs[1] * xs[2] * xs[3];
        let mut cols = vec![T::zero(); batch * kr * ohw];
        let mut out = vec![T::zero(); batch * co * ohw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..batch {
                let c = &mut cols[n * kr * ohw..(n + 1) * kr * ohw];
                kernels::im2col(&geom, &xv[n * chw..(n + 1) * chw], c);
                kernels::gemm_nn(co, kr, ohw, wv, c, &mut out[n * co * ohw..(n + 1) * co * ohw], false);
            }
        }
        if !self.requires_grad(w) {
            cols = Vec::new();
        }
        let out = Tensor::new(&[batch, co, geom.out_h, geom.out_w], out)?;
        Ok(self.push(out, &[x, w], Op::Conv2d { x, w, geom, batch, cols }))
    }

    /// Transposed convolution. `x: [N,Ci,H,W]`, `w: [Ci,Co,kh,kw]`; output
    /// spatial size `(H-1)·stride - 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || output_pad >= stride.max(1) {
            return Err(mismatch("conv_transpose2d", &xs, &ws));
        }
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let oh = ((h - 1) * stride + ws[2] + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| mismatch("conv_transpose2d", &xs, &ws))?;
        let ow = ((wd - 1) * stride + ws[3] + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| mismatch("conv_transpose2d", &xs, &ws))?;
        // Geometry of the adjoint convolution mapping the output back to x.
        let geom = ConvGeom::new(co, oh, ow, ws[2], ws[3], stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| mismatch("conv_transpose2d", &xs, &ws))?;
        let (kr, hw) = (geom.col_rows(), h * wd);
        let mut out = vec![T::zero(); batch * co * oh * ow];
        let mut cols = vec![T::zero(); kr * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..batch {
                kernels::gemm_tn(kr, ci, hw, wv, &xv[n * ci * hw..(n + 1) * ci * hw], &mut cols, false);
                kernels::col2im(&geom, &cols, &mut out[n * co * oh * ow..(n + 1) * co * oh * ow]);
            }
        }
        let out = Tensor::new(&[batch, co, oh, ow], out)?;
        Ok(self.push(out, &[x, w], Op::ConvTranspose2d { x, w, geom, batch }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, &[a], Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push(out, &[a], Op::LeakyRelu(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, &[a], Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, &[a], Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, &[a], Op::Exp(a))
    }

    /// Natural log; rejects nonpositive entries.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("nonpositive entry at index {i}"),
            });
        }
        let out = self.value(a).map(|x| x.ln());
        Ok(self.push(out, &[a], Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, &[a], Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, &[a], Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = last_axis(self.shape(a), "softmax_rows")?;
        let mut out = self.value(a).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(out, &[a], Op::SoftmaxRows(a)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, c) = last_axis(self.shape(a), "log_softmax_rows")?;
        let mut out = self.value(a).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(out, &[a], Op::LogSoftmaxRows(a)))
    }

    fn sum_f64(t: &Tensor<T>) -> f64 {
        t.data().iter().fold(0.0, |acc, v| acc + v.as_f64())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = Self::sum_f64(self.value(a));
        self.push(Tensor::scalar(T::from_f64(s)), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(bad_shape("mean", self.shape(a), "empty tensor"));
        }
        let s = Self::sum_f64(self.value(a)) / n as f64;
        Ok(self.push(Tensor::scalar(T::from_f64(s)), &[a], Op::Mean(a)))
    }

    /// `Σ |x|`.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, v| acc + v.as_f64().abs());
        self.push(Tensor::scalar(T::from_f64(s)), &[a], Op::L1Norm(a))
    }

    /// Scales every row (last axis) to unit L2 norm; zero rows are a domain error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows_impl(a, None)
    }

    /// Divides every row by `max(‖row‖, eps)`, so near-zero rows stay near zero.
    pub fn l2_normalize_rows_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.normalize_rows_impl(a, Some(T::from_f64(eps)))
    }

    fn normalize_rows_impl(&mut self, a: Var, eps: Option<T>) -> Result<Var> {
        let (rows, c) = last_axis(self.shape(a), "l2_normalize_rows")?;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let mut n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let mut hit = false;
            match eps {
                Some(e) if !(n >= e) => {
                    n = e;
                    hit = true;
                }
                None if !(n > T::zero()) => {
                    return Err(TensorError::Domain {
                        op: "l2_normalize_rows",
                        detail: format!("row {r} has zero norm"),
                    });
                }
                _ => {}
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
            clamped.push(hit);
        }
        Ok(self.push(out, &[a], Op::L2NormalizeRows { x: a, norms, clamped }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    /// Transpose of a 2-D matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(bad_shape("transpose", s, "expects rank 2"));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::new(&[c, r], kernels::transpose(r, c, self.value(a).data()))?;
        Ok(self.push(out, &[a], Op::Transpose(a)))
    }

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(bad_shape("slice", &s, format!("axis {axis} range {start}..{}", start + len)));
        }
        let (outer, dim, inner) = Self::split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, &[a], Op::Slice { x: a, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of empty list".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(bad_shape("concat", &s0, format!("axis {axis}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Self::split_axis(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, xs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Per-sample, per-channel normalization over the spatial axes of `[N,C,H,W]`.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(bad_shape("instance_norm", &s, "expects [N,C,H,W]"));
        }
        let hw = s[2] * s[3];
        let planes = s[0] * s[1];
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(planes);
        for p in 0..planes {
            let plane = &mut out.data_mut()[p * hw..(p + 1) * hw];
            let mean = plane.iter().fold(0.0, |acc, v| acc + v.as_f64()) / hw as f64;
            let var = plane
                .iter()
                .fold(0.0, |acc, v| acc + (v.as_f64() - mean).powi(2))
                / hw as f64;
            let istd = 1.0 / (var + eps).sqrt();
            let (m, is) = (T::from_f64(mean), T::from_f64(istd));
            for v in plane.iter_mut() {
                *v = (*v - m) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(out, &[a], Op::InstanceNorm { x: a, inv_std }))
    }

    /// Gather leading-axis rows of `x` (any rank ≥ 1).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        Ok(self.push(out, &[a], Op::GatherRows { x: a, idx: idx.to_vec() }))
    }

    /// `out[i,m] = Σ_e q[i,e]·s[i,m,e]` for `q: [N,E]`, `s: [N,M,E]`.
    pub fn rowwise_dot(&mut self, q: Var, s: Var) -> Result<Var> {
        let (qs, ss) = (self.shape(q).to_vec(), self.shape(s).to_vec());
        if qs.len() != 2 || ss.len() != 3 || qs[0] != ss[0] || qs[1] != ss[2] {
            return Err(mismatch("rowwise_dot", &qs, &ss));
        }
        let (n, m, e) = (ss[0], ss[1], ss[2]);
        let (qv, sv) = (self.value(q).data(), self.value(s).data());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let qr = &qv[i * e..(i + 1) * e];
            for j in 0..m {
                let sr = &sv[(i * m + j) * e..(i * m + j + 1) * e];
                data.push(qr.iter().zip(sr).map(|(&a, &b)| a * b).sum());
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(out, &[q, s], Op::RowwiseDot { q, s }))
    }

    /// `out[i] = x[i, cols[i]]` for `x: [N,M]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(bad_shape("pick_cols", &s, format!("{} column picks", cols.len())));
        }
        let v = self.value(a).data();
        let data = cols.iter().enumerate().map(|(i, &c)| v[i * s[1] + c]).collect();
        let out = Tensor::new(&[s[0]], data)?;
        Ok(self.push(out, &[a], Op::PickCols { x: a, cols: cols.to_vec() }))
    }

    /// `[N,C,H,W] → [N·H·W, C]`: one row per spatial location.
    pub fn nchw_to_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(bad_shape("nchw_to_rows", &s, "expects [N,C,H,W]"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let v = self.value(a).data();
        let mut data = vec![T::zero(); n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = v[(b * c + ch) * hw + p];
                }
            }
        }
        let out = Tensor::new(&[n * hw, c], data)?;
        Ok(self.push(out, &[a], Op::NchwToRows(a)))
    }

    /// Global average pool `[N,C,H,W] → [N,C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(bad_shape("mean_spatial", &s, "expects [N,C,H,W]"));
        }
        let hw = s[2] * s[3];
        let v = self.value(a).data();
        let data = (0..s[0] * s[1])
            .map(|p| {
                let m = v[p * hw..(p + 1) * hw].iter().fold(0.0, |acc, x| acc + x.as_f64());
                T::from_f64(m / hw as f64)
            })
            .collect();
        let out = Tensor::new(&[s[0], s[1]], data)?;
        Ok(self.push(out, &[a], Op::MeanSpatial(a)))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backward_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data).expect("shape");
        let elementwise = |v: Var, f: &dyn Fn(T, T, T) -> T| {
            let x = self.value(v).data();
            let data = x
                .iter()
                .zip(y.data())
                .zip(gy.data())
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect();
            like(v, data)
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = gy.data().iter().zip(vb).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = gy.data().iter().zip(va).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.map(|g| g * *s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::AddBias { x, b, axis } => {
                self.accumulate(grads, *x, gy.clone());
                if self.requires_grad(*b) {
                    let xs = self.shape(*x);
                    let inner: usize = xs[axis + 1..].iter().product();
                    let c = xs[*axis];
                    let mut db = vec![0.0f64; c];
                    for (i, g) in gy.data().iter().enumerate() {
                        db[(i / inner) % c] += g.as_f64();
                    }
                    let db = db.into_iter().map(T::from_f64).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, gy.data(), self.value(*b).data(), &mut d, false);
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(*a).data(), gy.data(), &mut d, false);
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Conv2d { x, w, geom, batch, cols } => {
                let co = self.shape(*w)[0];
                let (kr, ohw) = (geom.col_rows(), geom.col_cols());
                let chw = geom.channels * geom.height * geom.width;
                let g = gy.data();
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); co * kr];
                    for n in 0..*batch {
                        let c = &cols[n * kr * ohw..(n + 1) * kr * ohw];
                        kernels::gemm_nt(co, ohw, kr, &g[n * co * ohw..(n + 1) * co * ohw], c, &mut dw, true);
                    }
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); batch * chw];
                    let mut dcols = vec![T::zero(); kr * ohw];
                    for n in 0..*batch {
                        kernels::gemm_tn(kr, co, ohw, wv, &g[n * co * ohw..(n + 1) * co * ohw], &mut dcols, false);
                        kernels::col2im(geom, &dcols, &mut dx[n * chw..(n + 1) * chw]);
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
            }
            Op::ConvTranspose2d { x, w, geom, batch } => {
                let ci = self.shape(*w)[0];
                let (kr, hw) = (geom.col_rows(), geom.col_cols());
                let ochw = geom.channels * geom.height * geom.width;
                let g = gy.data();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); kr * hw];
                let mut dw = vec![T::zero(); if self.requires_grad(*w) { ci * kr } else { 0 }];
                let mut dx = vec![T::zero(); if self.requires_grad(*x) { batch * ci * hw } else { 0 }];
                for n in 0..*batch {
                    kernels::im2col(geom, &g[n * ochw..(n + 1) * ochw], &mut cols);
                    if !dw.is_empty() {
                        kernels::gemm_nt(ci, hw, kr, &xv[n * ci * hw..(n + 1) * ci * hw], &cols, &mut dw, true);
                    }
                    if !dx.is_empty() {
                        kernels::gemm_nn(ci, kr, hw, wv, &cols, &mut dx[n * ci * hw..(n + 1) * ci * hw], false);
                    }
                }
                if !dw.is_empty() {
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if !dx.is_empty() {
                    self.accumulate(grads, *x, like(*x, dx));
                }
            }
            Op::Relu(a) => {
                let d = elementwise(*a, &|x, _, g| if x > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let d = elementwise(*a, &|x, _, g| if x > T::zero() { g } else { g * s });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = elementwise(*a, &|_, y, g| g * (T::one() - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = elementwise(*a, &|_, y, g| g * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = elementwise(*a, &|_, y, g| g * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = elementwise(*a, &|x, _, g| g / x);
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = elementwise(*a, &|x, _, g| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = elementwise(*a, &|x, _, g| if x >= lo && x <= hi { g } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.data().chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::LogSoftmaxRows(a) => {
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.data().chunks(c)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - yv.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sum(a) => {
                let g = gy.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let g = gy.data()[0] / T::from_f64(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::L1Norm(a) => {
                let g = gy.data()[0];
                let d = self
                    .value(*a)
                    .map(|x| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows { x, norms, clamped } => {
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(gy.data().chunks(c))
                    .enumerate()
                {
                    if clamped[r] {
                        for (dv, &gv) in dr.iter_mut().zip(gr) {
                            *dv = gv / norms[r];
                        }
                        continue;
                    }
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Reshape(a) => {
                let d = gy.clone().reshape(self.shape(*a)).expect("reshape");
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let d = kernels::transpose(s[1], s[0], gy.data());
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = Self::split_axis(xs, *axis);
                let len = gy.shape()[*axis];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Concat { xs, axis } => {
                let ys = gy.shape();
                let (outer, total, inner) = Self::split_axis(ys, *axis);
                let mut offset = 0;
                for &x in xs {
                    let dlen = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let mut d = Vec::with_capacity(self.value(x).len());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.extend_from_slice(&gy.data()[src..src + dlen * inner]);
                        }
                        self.accumulate(grads, x, like(x, d));
                    }
                    offset += dlen;
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = y.shape();
                let hw = s[2] * s[3];
                let mut d = vec![T::zero(); y.len()];
                let n = T::from_f64(hw as f64);
                for (p, is) in inv_std.iter().enumerate() {
                    let yr = &y.data()[p * hw..(p + 1) * hw];
                    let gr = &gy.data()[p * hw..(p + 1) * hw];
                    let gm: T = gr.iter().copied().sum::<T>() / n;
                    let gym: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / n;
                    for ((dv, &yv), &gv) in d[p * hw..(p + 1) * hw].iter_mut().zip(yr).zip(gr) {
                        *dv = *is * (gv - gm - yv * gym);
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::GatherRows { x, idx } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..inner {
                        d[i * inner + k] += gy.data()[r * inner + k];
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::RowwiseDot { q, s } => {
                let ss = self.shape(*s);
                let (n, m, e) = (ss[0], ss[1], ss[2]);
                let (qv, sv, g) = (self.value(*q).data(), self.value(*s).data(), gy.data());
                if self.requires_grad(*q) {
                    let mut d = vec![T::zero(); n * e];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            let sr = &sv[(i * m + j) * e..(i * m + j + 1) * e];
                            for (dv, &sv) in d[i * e..(i + 1) * e].iter_mut().zip(sr) {
                                *dv += gij * sv;
                            }
                        }
                    }
                    self.accumulate(grads, *q, like(*q, d));
                }
                if self.requires_grad(*s) {
                    let mut d = vec![T::zero(); n * m * e];
                    for i in 0..n {
                        let qr = &qv[i * e..(i + 1) * e];
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for (dv, &qv) in d[(i * m + j) * e..(i * m + j + 1) * e].iter_mut().zip(qr) {
                                *dv = gij * qv;
                            }
                        }
                    }
                    self.accumulate(grads, *s, like(*s, d));
                }
            }
            Op::PickCols { x, cols } => {
                let m = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (i, &c) in cols.iter().enumerate() {
                    d[i * m + c] = gy.data()[i];
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::NchwToRows(a) => {
                let s = self.shape(*a);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(b * c + ch) * hw + p] = gy.data()[(b * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MeanSpatial(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut d = vec![T::zero(); self.value(*a).len()];
                for (p, &g) in gy.data().iter().enumerate() {
                    d[p * hw..(p + 1) * hw].fill(g * inv);
                }
                self.accumulate(grads, *a, like(*a, d));
            }
        }
    }
}
