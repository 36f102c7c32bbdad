use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{arg_err, dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sign(Var),
    Clamp {
        x: Var,
        lo: Real,
        hi: Real,
    },
    Relu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    AvgPool {
        x: Var,
        axis: usize,
        window: usize,
        stride: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        z: Var,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
    KlLog {
        lp: Var,
        lq: Var,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    MaxExcluding {
        x: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sign(x)
            | Op::Clamp { x, .. }
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Gather { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::CrossEntropy { z: x, .. }
            | Op::Pick { x, .. }
            | Op::MaxExcluding { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::KlLog { lp, lq } => vec![*lp, *lq],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records forward operations so that [`Graph::backward`] can compute
/// gradients for every leaf registered with `requires_grad`.
///
/// Leaves may borrow their tensors for the lifetime `'a`, which lets a
/// network register its parameters without copying them.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn variable_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Element-wise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.push("scale", v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: Real) -> Result<Var> {
        let v = self.map(a, |x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        self.push(
            "matmul",
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        )
    }

    /// Adds a per-feature bias along axis 1 of `[N, F, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(dim_err!("add_bias: bias {:?} does not fit input {:?}", sb, sx));
        }
        let (outer, f, inner) = kernels::split_axis(sx, 1);
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for o in 0..outer {
            for j in 0..f {
                let base = (o * f + j) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[j];
                }
            }
        }
        let shape = sx.to_vec();
        self.push("add_bias", Tensor { shape, data: out }, Op::AddBias(x, bias))
    }

    /// Element-wise sign with `sign(0) = 0`; its gradient is zero.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.push("sign", v, Op::Sign(a))
    }

    pub fn clamp(&mut self, a: Var, lo: Real, hi: Real) -> Result<Var> {
        if lo > hi {
            return Err(arg_err!("clamp: lower bound {lo} exceeds upper bound {hi}"));
        }
        let v = self.map(a, |x| x.max(lo).min(hi));
        self.push("clamp", v, Op::Clamp { x: a, lo, hi })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, Real::ln);
        self.push("log", v, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: Real = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s: Real = self.data(a).iter().sum();
        self.push("mean", Tensor::scalar(s / n as Real), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a))
    }

    /// Collapses all axes after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(dim_err!("flatten of a scalar"));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(a, &shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(dim_err!("concat: {:?} does not conform to {:?}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let e = self.shape(v)[axis];
                data.extend_from_slice(&self.data(v)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Per-sample gather: `out[n, t] = x[n, index[t]]` over the flattened
    /// features of each sample, producing `[N] ++ out_shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(dim_err!("gather of a scalar"));
        }
        let n = s[0];
        let feat: usize = s[1..].iter().product();
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(dim_err!(
                "gather: {} indices cannot form {:?}",
                index.len(),
                out_shape
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= feat) {
            return Err(dim_err!("gather index {bad} out of range {feat}"));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(n * index.len());
        for row in src.chunks(feat.max(1)).take(n) {
            data.extend(index.iter().map(|&i| row[i]));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(out_shape);
        self.push("gather", Tensor { shape, data }, Op::Gather { x, index })
    }

    /// Cross-correlation of `N x C x H x W` input with `K x C x kh x kw`
    /// kernels and an optional length-`K` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(dim_err!("conv2d expects 4-D input and kernels, got {:?} and {:?}", sx, sw));
        }
        if stride == 0 {
            return Err(arg_err!("conv2d stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, kc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kc != c {
            return Err(dim_err!("conv2d: kernels expect {kc} channels, input has {c}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(dim_err!("conv2d: bias {:?} does not match {k} kernels", self.shape(b)));
            }
        }
        let out_extent = |extent: usize, kernel: usize| -> Result<usize> {
            let span = extent + 2 * padding;
            if span < kernel || stride == 0 {
                return Err(dim_err!(
                    "conv2d: extent {extent} with padding {padding}, kernel {kernel}, stride {stride} gives no output"
                ));
            }
            Ok((span - kernel) / stride + 1)
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: out_extent(h, kh)?,
            out_w: out_extent(wd, kw)?,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; n * k * cols_n];
        let input = self.data(x);
        let weight = self.data(w);
        for i in 0..n {
            kernels::im2col(&geom, &input[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
            let dst = &mut out[i * k * cols_n..(i + 1) * k * cols_n];
            kernels::gemm_nn(k, rows, cols_n, weight, &cols, dst);
            if let Some(b) = b {
                let bias = self.data(b);
                for (kk, chunk) in dst.chunks_mut(cols_n).enumerate() {
                    for v in chunk {
                        *v += bias[kk];
                    }
                }
            }
        }
        let shape = vec![n, k, geom.out_h, geom.out_w];
        self.push("conv2d", Tensor { shape, data: out }, Op::Conv2d { x, w, b, geom })
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// With `batch_stats` the batch mean and biased variance normalize the
    /// input and are returned (as `(mean, unbiased variance)`) for the
    /// caller to fold into running statistics. Otherwise `running` supplies
    /// the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[Real], &[Real])>,
        eps: Real,
    ) -> Result<(Var, Option<(Vec<Real>, Vec<Real>)>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(dim_err!("batch_norm expects at least 2 axes, got {:?}", sx));
        }
        let (n, c) = (sx[0], sx[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "batch_norm: gamma {:?} / beta {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        let input = self.data(x);
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(dim_err!("batch_norm: running stats do not match {c} channels"));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
            None => {
                if n < 2 {
                    return Err(arg_err!("batch_norm in train mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * inner;
                        s += input[base..base + inner].iter().sum::<Real>();
                    }
                    let m = s / count as Real;
                    let mut q = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * inner;
                        q += input[base..base + inner]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<Real>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as Real;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; input.len()];
        let mut out = vec![0.0; input.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for t in base..base + inner {
                    let h = (input[t] - mean[ch]) * inv_std[ch];
                    xhat[t] = h;
                    out[t] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = batch_stats.then(|| {
            let unbiased = if count > 1 {
                var.iter()
                    .map(|v| v * count as Real / (count - 1) as Real)
                    .collect()
            } else {
                var.clone()
            };
            (mean, unbiased)
        });
        let v = self.push(
            "batch_norm",
            Tensor {
                shape: sx,
                data: out,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    /// Averages windows along exactly one axis.
    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err!("avg_pool axis {axis} out of range for {:?}", s));
        }
        if window == 0 || stride == 0 {
            return Err(arg_err!("avg_pool window and stride must be positive"));
        }
        if window > s[axis] {
            return Err(dim_err!(
                "avg_pool window {window} exceeds extent {} of axis {axis}",
                s[axis]
            ));
        }
        let (outer, extent, inner) = kernels::split_axis(&s, axis);
        let out_e = (extent - window) / stride + 1;
        let src = self.data(x);
        let mut data = vec![0.0; outer * out_e * inner];
        let scale = 1.0 / window as Real;
        for o in 0..outer {
            for e in 0..out_e {
                let dst = &mut data[(o * out_e + e) * inner..(o * out_e + e + 1) * inner];
                for t in 0..window {
                    let base = (o * extent + e * stride + t) * inner;
                    for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= scale;
                }
            }
        }
        let mut shape = s;
        shape[axis] = out_e;
        self.push(
            "avg_pool",
            Tensor { shape, data },
            Op::AvgPool {
                x,
                axis,
                window,
                stride,
            },
        )
    }

    fn rows(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            0 => Err(dim_err!("{op} of a scalar")),
            _ => {
                let cols = s[s.len() - 1];
                if cols == 0 {
                    return Err(dim_err!("{op} over an empty axis"));
                }
                Ok((self.data(v).len() / cols, cols))
            }
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let (_, cols) = self.rows(z, "softmax")?;
        let mut out = vec![0.0; self.data(z).len()];
        for (row, o) in self.data(z).chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::softmax_row(row, o);
        }
        let shape = self.shape(z).to_vec();
        self.push("softmax", Tensor { shape, data: out }, Op::Softmax(z))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let (_, cols) = self.rows(z, "log_softmax")?;
        let mut out = vec![0.0; self.data(z).len()];
        for (row, o) in self.data(z).chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::log_softmax_row(row, o);
        }
        let shape = self.shape(z).to_vec();
        self.push("log_softmax", Tensor { shape, data: out }, Op::LogSoftmax(z))
    }

    fn check_labels(&self, z: Var, labels: &[usize], op: &str) -> Result<usize> {
        let s = self.shape(z);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!(
                "{op}: logits {:?} do not match {} labels",
                s,
                labels.len()
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(arg_err!("{op}: label {y} out of range for {} classes", s[1]));
        }
        Ok(s[1])
    }

    /// Per-sample cross entropy `-log_softmax(z)[y]` of `N x C` raw logits.
    pub fn cross_entropy(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let cols = self.check_labels(z, labels, "cross_entropy")?;
        let mut probs = vec![0.0; self.data(z).len()];
        let mut out = Vec::with_capacity(labels.len());
        let mut lsm = vec![0.0; cols];
        for ((row, p), &y) in self
            .data(z)
            .chunks(cols)
            .zip(probs.chunks_mut(cols))
            .zip(labels)
        {
            kernels::log_softmax_row(row, &mut lsm);
            out.push(-lsm[y]);
            for (pv, &l) in p.iter_mut().zip(&lsm) {
                *pv = l.exp();
            }
        }
        self.push(
            "cross_entropy",
            Tensor::vector(&out),
            Op::CrossEntropy {
                z,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Row-wise `KL(p || q) = sum_i p_i (log p_i - log q_i)` given the
    /// log-probabilities of both distributions.
    pub fn kl_log(&mut self, lp: Var, lq: Var) -> Result<Var> {
        self.same_shape("kl_log", lp, lq)?;
        let (_, cols) = self.rows(lp, "kl_log")?;
        let out: Vec<Real> = self
            .data(lp)
            .chunks(cols)
            .zip(self.data(lq).chunks(cols))
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x.exp() * (x - y)).sum())
            .collect();
        self.push("kl_divergence", Tensor::vector(&out), Op::KlLog { lp, lq })
    }

    /// Row-wise `KL(p || q)` of probability vectors. Each row must be
    /// strictly positive and sum to one within `1e-6`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let (_, cols) = self.rows(p, "kl_divergence")?;
        for v in [p, q] {
            for row in self.data(v).chunks(cols) {
                let s: Real = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x <= 0.0) {
                    return Err(arg_err!(
                        "kl_divergence expects strictly positive rows summing to 1, got sum {s}"
                    ));
                }
            }
        }
        let lp = self.log(p)?;
        let lq = self.log(q)?;
        self.kl_log(lp, lq)
    }

    /// `out[n] = x[n, index[n]]` for `N x C` input.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let cols = self.check_labels(x, index, "pick")?;
        let out: Vec<Real> = self
            .data(x)
            .chunks(cols)
            .zip(index)
            .map(|(row, &i)| row[i])
            .collect();
        self.push(
            "pick",
            Tensor::vector(&out),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// `out[n] = max_{k != exclude[n]} x[n, k]` for `N x C` input, `C >= 2`.
    pub fn max_excluding(&mut self, x: Var, exclude: &[usize]) -> Result<Var> {
        let cols = self.check_labels(x, exclude, "max_excluding")?;
        if cols < 2 {
            return Err(dim_err!("max_excluding needs at least 2 columns"));
        }
        let mut argmax = Vec::with_capacity(exclude.len());
        let mut out = Vec::with_capacity(exclude.len());
        for (row, &y) in self.data(x).chunks(cols).zip(exclude) {
            let mut best = if y == 0 { 1 } else { 0 };
            for (k, &v) in row.iter().enumerate() {
                if k != y && v > row[best] {
                    best = k;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        self.push(
            "max_excluding",
            Tensor::vector(&out),
            Op::MaxExcluding { x, argmax },
        )
    }

    /// Propagates gradients from a scalar `loss` to every reachable leaf
    /// that requires them. Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<Real>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Real], adj: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(adj, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (d, s) in acc!(v).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    for (d, s) in acc!(*a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if wants(*b) {
                    for (d, s) in acc!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b);
                    for ((d, s), o) in acc!(*a).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a);
                    for ((d, s), o) in acc!(*b).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    for (d, gv) in acc!(*a).iter_mut().zip(g) {
                        *d += s * gv;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if wants(*a) {
                    for (d, gv) in acc!(*a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    kernels::gemm_nt(m, n, k, g, val(*b), acc!(*a));
                }
                if wants(*b) {
                    kernels::gemm_tn(k, m, n, val(*a), g, acc!(*b));
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    for (d, gv) in acc!(*x).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let (outer, f, inner) = kernels::split_axis(nodes[x.0].value.shape(), 1);
                    let db = acc!(*b);
                    for o in 0..outer {
                        for j in 0..f {
                            let base = (o * f + j) * inner;
                            db[j] += g[base..base + inner].iter().sum::<Real>();
                        }
                    }
                }
            }
            Op::Sign(a) => {
                if wants(*a) {
                    acc!(*a);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, gv), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, gv), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, gv), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    for d in acc!(*x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let d = acc!(*x);
                    let s = g[0] / d.len() as Real;
                    for v in d.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let e = nodes[v.0].value.shape()[*axis];
                    if wants(v) {
                        let d = acc!(v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                            for (dv, sv) in d[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    offset += e;
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let d = acc!(*x);
                    let n = nodes[x.0].value.shape()[0];
                    let feat = d.len() / n.max(1);
                    for s in 0..n {
                        let grow = &g[s * index.len()..(s + 1) * index.len()];
                        let drow = &mut d[s * feat..(s + 1) * feat];
                        for (&t, gv) in index.iter().zip(grow) {
                            drow[t] += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = nodes[x.0].value.shape()[0];
                let k = nodes[w.0].value.shape()[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let input = val(*x);
                let weight = val(*w);
                if let Some(b) = b {
                    if wants(*b) {
                        let db = acc!(*b);
                        for s in 0..n {
                            for kk in 0..k {
                                let base = (s * k + kk) * cols_n;
                                db[kk] += g[base..base + cols_n].iter().sum::<Real>();
                            }
                        }
                    }
                }
                let want_w = wants(*w);
                let want_x = wants(*x);
                if want_w || want_x {
                    let mut cols = vec![0.0; rows * cols_n];
                    let mut dcols = vec![0.0; rows * cols_n];
                    for s in 0..n {
                        let gs = &g[s * k * cols_n..(s + 1) * k * cols_n];
                        if want_w {
                            kernels::im2col(geom, &input[s * in_sz..(s + 1) * in_sz], &mut cols);
                            kernels::gemm_nt(k, cols_n, rows, gs, &cols, acc!(*w));
                        }
                        if want_x {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn(rows, k, cols_n, weight, gs, &mut dcols);
                            let dx = acc!(*x);
                            kernels::col2im(geom, &dcols, &mut dx[s * in_sz..(s + 1) * in_sz]);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as Real;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for t in base..base + inner {
                            sum_g[ch] += g[t];
                            sum_gx[ch] += g[t] * xhat[t];
                        }
                    }
                }
                if wants(*gamma) {
                    for (d, v) in acc!(*gamma).iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if wants(*beta) {
                    for (d, v) in acc!(*beta).iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for t in base..base + inner {
                                if *batch_stats {
                                    dx[t] += scale
                                        * (g[t] - sum_g[ch] / count - xhat[t] * sum_gx[ch] / count);
                                } else {
                                    dx[t] += scale * g[t];
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool {
                x,
                axis,
                window,
                stride,
            } => {
                if wants(*x) {
                    let (outer, extent, inner) =
                        kernels::split_axis(nodes[x.0].value.shape(), *axis);
                    let out_e = (extent - window) / stride + 1;
                    let scale = 1.0 / *window as Real;
                    let d = acc!(*x);
                    for o in 0..outer {
                        for e in 0..out_e {
                            let src = &g[(o * out_e + e) * inner..(o * out_e + e + 1) * inner];
                            for t in 0..*window {
                                let base = (o * extent + e * stride + t) * inner;
                                for (dv, &sv) in d[base..base + inner].iter_mut().zip(src) {
                                    *dv += sv * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(z) => {
                if wants(*z) {
                    let y = nodes[i].value.data();
                    let cols = *nodes[i].value.shape().last().unwrap();
                    let d = acc!(*z);
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(z) => {
                if wants(*z) {
                    let y = nodes[i].value.data();
                    let cols = *nodes[i].value.shape().last().unwrap();
                    let d = acc!(*z);
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                        let total: Real = gr.iter().sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy { z, labels, probs } => {
                if wants(*z) {
                    let cols = nodes[z.0].value.shape()[1];
                    let d = acc!(*z);
                    for (s, &y) in labels.iter().enumerate() {
                        let row = &mut d[s * cols..(s + 1) * cols];
                        for (k, dv) in row.iter_mut().enumerate() {
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            *dv += g[s] * (probs[s * cols + k] - onehot);
                        }
                    }
                }
            }
            Op::KlLog { lp, lq } => {
                let cols = *nodes[lp.0].value.shape().last().unwrap();
                let (lpv, lqv) = (val(*lp), val(*lq));
                if wants(*lp) {
                    let d = acc!(*lp);
                    for (t, dv) in d.iter_mut().enumerate() {
                        let p = lpv[t].exp();
                        *dv += g[t / cols] * p * (lpv[t] - lqv[t] + 1.0);
                    }
                }
                if wants(*lq) {
                    let d = acc!(*lq);
                    for (t, dv) in d.iter_mut().enumerate() {
                        *dv -= g[t / cols] * lpv[t].exp();
                    }
                }
            }
            Op::Pick { x, index } => {
                if wants(*x) {
                    let cols = nodes[x.0].value.shape()[1];
                    let d = acc!(*x);
                    for (s, &k) in index.iter().enumerate() {
                        d[s * cols + k] += g[s];
                    }
                }
            }
            Op::MaxExcluding { x, argmax } => {
                if wants(*x) {
                    let cols = nodes[x.0].value.shape()[1];
                    let d = acc!(*x);
                    for (s, &k) in argmax.iter().enumerate() {
                        d[s * cols + k] += g[s];
                    }
                }
            }
        }
    }
}

fn slot<'s>(adj: &'s mut [Option<Vec<Real>>], nodes: &[Node<'_>], v: Var) -> &'s mut Vec<Real> {
    let len = nodes[v.0].value.len();
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}
