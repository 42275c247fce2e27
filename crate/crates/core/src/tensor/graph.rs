//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward pass needs. Nodes are stored in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. A tape lives for
//! one optimizer step and is then dropped.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, Real, Tensor};
use crate::error::{CastError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Relu,
    Scale(f64),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn sites(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, bcast: bool },
    Sub { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale { a: Var, c: T },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Relu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanLast { a: Var },
    MeanFirst { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    SliceLast { a: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    SoftmaxLast { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    AvgPool2d { a: Var, f: usize },
    BceLogits { z: Var, y: Vec<T> },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } => vec![*a, *b],
            Scale { a, .. }
            | Sigmoid { a }
            | Exp { a }
            | Log { a }
            | Relu { a }
            | Sum { a }
            | Mean { a }
            | MeanLast { a }
            | MeanFirst { a }
            | Reshape { a }
            | Permute { a, .. }
            | SliceLast { a, .. }
            | SoftmaxLast { a }
            | Dropout { a, .. }
            | AvgPool2d { a, .. } => vec![*a],
            BceLogits { z, .. } => vec![*z],
            ConcatLast { parts } => parts.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, k, b, .. } => vec![*x, *k, *b],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct GradientMap<T: Real = f64> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    leaf_grads: BTreeMap<Var, Tensor<T>>,
}

fn same_or_bcast(a: &[usize], b: &[usize], what: &str) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if b.len() == 1 && a.last() == Some(&b[0]) && a.len() > 1 {
        return Ok(true);
    }
    Err(CastError::shape(format!("{what}: {a:?} vs {b:?} (only equal shapes or a trailing row vector broadcast)")))
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    'outer: loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: param, param });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter leaves in creation order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].param).map(Var).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(CastError::NumericalFailure(
                "non-finite value produced from finite inputs".into(),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CastError::shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(CastError::shape(format!("matmul inner dims {k} vs {k2} ({sa:?} x {sb:?})")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::from_vec(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(CastError::shape("transpose needs a rank-2 tensor"));
        }
        self.permute(a, &[1, 0])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| CastError::shape(format!("{op:?} needs a second operand")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Scale(c) => self.scale(a, T::c(c)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let bcast = same_or_bcast(self.shape(a), self.shape(b), what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if bcast {
            let width = vb.len();
            va.data()
                .chunks_exact(width)
                .flat_map(|row| row.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::from_vec(va.shape(), data)?, bcast))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(CastError::DomainError(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu { a })
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::c(t.len() as f64));
        self.push(v, Op::Mean { a })
    }

    /// Mean over the trailing axis: `[.., n] -> [..]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        let n = *shape.last().unwrap();
        let inv = T::one() / T::c(n as f64);
        let data: Vec<T> = t.rows().map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let v = Tensor::from_vec(&out_shape, data)?;
        self.push(v, Op::MeanLast { a })
    }

    /// Mean over the leading axis: `[n, ..] -> [..]`.
    pub fn mean_first(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(CastError::shape("mean_first needs rank >= 2"));
        }
        let inner: usize = shape[1..].iter().product();
        let mut acc = vec![T::zero(); inner];
        for chunk in t.data().chunks_exact(inner) {
            for (s, &x) in acc.iter_mut().zip(chunk) {
                *s += x;
            }
        }
        let inv = T::one() / T::c(shape[0] as f64);
        acc.iter_mut().for_each(|s| *s = *s * inv);
        let v = Tensor::from_vec(&shape[1..], acc)?;
        self.push(v, Op::MeanFirst { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(CastError::shape(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        let v = Tensor::from_vec(&shape, data)?;
        self.push(v, Op::Permute { a, axes: axes.to_vec() })
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().unwrap();
        if len == 0 || start + len > width {
            return Err(CastError::shape(format!("slice {start}..{} of width {width}", start + len)));
        }
        let data: Vec<T> = t.rows().flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::from_vec(&shape, data)?;
        self.push(v, Op::SliceLast { a, start })
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CastError::shape("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(CastError::shape(format!("concat {:?} with {s:?}", self.shape(first))));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::from_vec(&shape, data)?;
        self.push(v, Op::ConcatLast { parts: parts.to_vec() })
    }

    // ---- neural primitives ----------------------------------------------

    /// Softmax over the trailing axis with per-row max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for row in t.rows() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let v = Tensor::from_vec(t.shape(), data)?;
        self.push(v, Op::SoftmaxLast { a })
    }

    /// Layer normalization over the trailing axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if d < 2 {
            return Err(CastError::shape("layer_norm needs at least 2 features"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CastError::shape(format!(
                "layer_norm affine params {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps >= 0.0) {
            return Err(CastError::DomainError(format!("layer_norm eps {eps}")));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_d = T::one() / T::c(d as f64);
        let eps = T::c(eps);
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(t.len() / d);
        let mut out = Vec::with_capacity(t.len());
        for row in t.rows() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::from_vec(t.shape(), out)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CastError::InvalidRate(format!("dropout rate {rate} must be in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::c(1.0 / (1.0 - rate));
        let t = self.value(a);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::from_vec(t.shape(), data)?;
        self.push(v, Op::Dropout { a, mask })
    }

    /// 2-D cross-correlation. `x` is `[C, H, W]` or `[N, C, H, W]`, `kernel` is
    /// `[C_out, C, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c_in, h, w) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(CastError::shape(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let ks = self.shape(kernel).to_vec();
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(CastError::shape(format!("conv2d kernel must be rank 4, got {ks:?}")));
        };
        if kc != c_in {
            return Err(CastError::shape(format!("conv2d kernel expects {kc} channels, input has {c_in}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(CastError::shape(format!("conv2d bias {:?} for {c_out} outputs", self.shape(bias))));
        }
        if stride == 0 {
            return Err(CastError::shape("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(CastError::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (patch, sites) = (geom.patch(), geom.sites());
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();
        let mut out = vec![T::zero(); n * c_out * sites];
        for f in 0..n {
            let o = &mut out[f * c_out * sites..(f + 1) * c_out * sites];
            for (co, row) in o.chunks_exact_mut(sites).enumerate() {
                row.fill(bdata[co]);
            }
            gemm(c_out, patch, sites, kdata, false, &cols[f * patch * sites..(f + 1) * patch * sites], false, o, true);
        }
        let shape = if xs.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![n, c_out, geom.h_out, geom.w_out]
        };
        let v = Tensor::from_vec(&shape, out)?;
        self.push(v, Op::Conv2d { x, k: kernel, b: bias, geom, cols })
    }

    /// Non-overlapping `f×f` average pooling of `[N, C, H, W]` or `[C, H, W]`.
    pub fn avg_pool2d(&mut self, a: Var, f: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 3 || f == 0 {
            return Err(CastError::shape(format!("avg_pool2d on {s:?} with factor {f}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % f != 0 || w % f != 0 {
            return Err(CastError::shape(format!("avg_pool2d factor {f} does not divide {h}x{w}")));
        }
        if f == 1 {
            return Ok(a);
        }
        let (ho, wo) = (h / f, w / f);
        let planes = s[..s.len() - 2].iter().product::<usize>();
        let inv = T::one() / T::c((f * f) as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / f) * wo + x / f] += plane[y * w + x];
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let v = Tensor::from_vec(&shape, out)?;
        self.push(v, Op::AvgPool2d { a, f })
    }

    /// Elementwise binary cross-entropy on logits against fixed targets:
    /// `softplus(-z) + (1 - y) z`, evaluated as `max(z, 0) - y z + log1p(exp(-|z|))`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(z);
        if t.len() != targets.len() {
            return Err(CastError::shape(format!("{} logits vs {} targets", t.len(), targets.len())));
        }
        let y: Vec<T> = targets.iter().map(|&v| T::c(v)).collect();
        let data = t
            .data()
            .iter()
            .zip(&y)
            .map(|(&z, &y)| z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p())
            .collect();
        let v = Tensor::from_vec(t.shape(), data)?;
        self.push(v, Op::BceLogits { z, y })
    }

    // ---- backward ---------------------------------------------------------

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<T>> {
        self.backward_seeded(loss, T::one())
    }

    /// Backpropagates `seed · ∂loss/∂θ` and adds it to the per-leaf accumulators.
    pub fn backward_seeded(&mut self, loss: Var, seed: T) -> Result<GradientMap<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CastError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].param {
                let entry = self
                    .leaf_grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
                entry.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for v in self.params() {
            self.leaf_grads.entry(v).or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        Ok(GradientMap { grads: self.leaf_grads.clone() })
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        // Returns the adjoint buffer for `v`, zero-initialised on first touch.
        fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        macro_rules! acc_map {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let buf = slot(adj, v, len_of(v));
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += $f(k);
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let buf = slot(adj, *a, m * k);
                    if *ta {
                        gemm(k, n, m, bd, *tb, g, true, buf, true);
                    } else {
                        gemm(m, n, k, g, false, bd, !*tb, buf, true);
                    }
                }
                if wants(*b) {
                    let buf = slot(adj, *b, k * n);
                    if *tb {
                        gemm(n, m, k, g, true, ad, *ta, buf, true);
                    } else {
                        gemm(k, m, n, ad, !*ta, g, false, buf, true);
                    }
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                acc_map!(*a, |k| g[k]);
                if wants(*b) {
                    let buf = slot(adj, *b, len_of(*b));
                    if *bcast {
                        for row in g.chunks_exact(buf.len()) {
                            buf.iter_mut().zip(row).for_each(|(s, &x)| *s += sign * x);
                        }
                    } else {
                        buf.iter_mut().zip(g).for_each(|(s, &x)| *s += sign * x);
                    }
                }
            }
            Op::Mul { a, b, bcast } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let wb = bd.len();
                if *bcast {
                    acc_map!(*a, |k| g[k] * bd[k % wb]);
                    if wants(*b) {
                        let buf = slot(adj, *b, wb);
                        for (row_g, row_a) in g.chunks_exact(wb).zip(ad.chunks_exact(wb)) {
                            for j in 0..wb {
                                buf[j] += row_g[j] * row_a[j];
                            }
                        }
                    }
                } else {
                    acc_map!(*a, |k| g[k] * bd[k]);
                    acc_map!(*b, |k| g[k] * ad[k]);
                }
            }
            Op::Scale { a, c } => acc_map!(*a, |k| g[k] * *c),
            Op::Sigmoid { a } => acc_map!(*a, |k| g[k] * val[k] * (T::one() - val[k])),
            Op::Exp { a } => acc_map!(*a, |k| g[k] * val[k]),
            Op::Log { a } => {
                let ad = nodes[a.0].value.data();
                acc_map!(*a, |k| g[k] / ad[k])
            }
            Op::Relu { a } => {
                let ad = nodes[a.0].value.data();
                acc_map!(*a, |k| if ad[k] > T::zero() { g[k] } else { T::zero() })
            }
            Op::Sum { a } => acc_map!(*a, |_| g[0]),
            Op::Mean { a } => {
                let inv = g[0] / T::c(len_of(*a) as f64);
                acc_map!(*a, |_| inv)
            }
            Op::MeanLast { a } => {
                let n = *nodes[a.0].value.shape().last().unwrap();
                let inv = T::one() / T::c(n as f64);
                acc_map!(*a, |k| g[k / n] * inv)
            }
            Op::MeanFirst { a } => {
                let rows = nodes[a.0].value.shape()[0];
                let inner = g.len();
                let inv = T::one() / T::c(rows as f64);
                acc_map!(*a, |k| g[k % inner] * inv)
            }
            Op::Reshape { a } => acc_map!(*a, |k| g[k]),
            Op::Permute { a, axes } => {
                if wants(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inverse);
                    let buf = slot(adj, *a, back.len());
                    buf.iter_mut().zip(&back).for_each(|(s, &x)| *s += x);
                }
            }
            Op::SliceLast { a, start } => {
                if wants(*a) {
                    let width = *nodes[a.0].value.shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let buf = slot(adj, *a, len_of(*a));
                    for (dst, src) in buf.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                        dst[*start..*start + len].iter_mut().zip(src).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = *nodes[p.0].value.shape().last().unwrap();
                    if wants(p) {
                        let buf = slot(adj, p, len_of(p));
                        for (dst, src) in buf.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            dst.iter_mut().zip(&src[offset..offset + w]).for_each(|(s, &x)| *s += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::SoftmaxLast { a } => {
                if wants(*a) {
                    let n = *node.value.shape().last().unwrap();
                    let buf = slot(adj, *a, val.len());
                    for ((dst, y), dy) in buf.chunks_exact_mut(n).zip(val.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let dot: T = y.iter().zip(dy).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dst[j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.len();
                let gam = nodes[gamma.0].value.data();
                if wants(*gamma) {
                    let buf = slot(adj, *gamma, d);
                    for (dy, h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += dy[j] * h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let buf = slot(adj, *beta, d);
                    for dy in g.chunks_exact(d) {
                        buf.iter_mut().zip(dy).for_each(|(s, &v)| *s += v);
                    }
                }
                if wants(*x) {
                    let inv_d = T::one() / T::c(d as f64);
                    let buf = slot(adj, *x, g.len());
                    for (r, ((dst, dy), h)) in
                        buf.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = dy[j] * gam[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..d {
                            let dh = dy[j] * gam[j];
                            dst[j] += rstd[r] * (dh - inv_d * s1 - h[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => acc_map!(*a, |k| g[k] * mask[k]),
            Op::Conv2d { x, k, b, geom, cols } => {
                let (patch, sites, c_out) = (geom.patch(), geom.sites(), geom.c_out);
                if wants(*b) {
                    let buf = slot(adj, *b, c_out);
                    for frame in g.chunks_exact(c_out * sites) {
                        for (co, row) in frame.chunks_exact(sites).enumerate() {
                            buf[co] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if wants(*k) {
                    let buf = slot(adj, *k, c_out * patch);
                    for f in 0..geom.n {
                        let gf = &g[f * c_out * sites..(f + 1) * c_out * sites];
                        let cf = &cols[f * patch * sites..(f + 1) * patch * sites];
                        gemm(c_out, sites, patch, gf, false, cf, true, buf, true);
                    }
                }
                if wants(*x) {
                    let kd = nodes[k.0].value.data();
                    let mut dcols = vec![T::zero(); patch * sites];
                    let buf = slot(adj, *x, geom.n * geom.c_in * geom.h * geom.w);
                    for f in 0..geom.n {
                        let gf = &g[f * c_out * sites..(f + 1) * c_out * sites];
                        gemm(patch, c_out, sites, kd, true, gf, false, &mut dcols, false);
                        let plane = geom.c_in * geom.h * geom.w;
                        col2im_add(&dcols, geom, &mut buf[f * plane..(f + 1) * plane]);
                    }
                }
            }
            Op::AvgPool2d { a, f } => {
                let s = nodes[a.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (ho, wo) = (h / f, w / f);
                let inv = T::one() / T::c((f * f) as f64);
                acc_map!(*a, |k: usize| {
                    let (p, rem) = (k / (h * w), k % (h * w));
                    let (y, x) = (rem / w, rem % w);
                    g[p * ho * wo + (y / f) * wo + x / f] * inv
                })
            }
            Op::BceLogits { z, y } => {
                let zd = nodes[z.0].value.data();
                acc_map!(*z, |k| g[k] * (sigmoid(zd[k]) - y[k]))
            }
        }
    }
}

/// Unfolds `[N, C, H, W]` into per-frame `[C·kh·kw, H_out·W_out]` patch matrices.
fn im2col<T: Real>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let (patch, sites) = (geom.patch(), geom.sites());
    let mut cols = vec![T::zero(); geom.n * patch * sites];
    let plane = geom.h * geom.w;
    for f in 0..geom.n {
        let xf = &x[f * geom.c_in * plane..(f + 1) * geom.c_in * plane];
        let cf = &mut cols[f * patch * sites..(f + 1) * patch * sites];
        for c in 0..geom.c_in {
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let row = (c * geom.kh + ky) * geom.kw + kx;
                    let dst = &mut cf[row * sites..(row + 1) * sites];
                    for oy in 0..geom.h_out {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.h as isize {
                            continue;
                        }
                        let src = &xf[c * plane + iy as usize * geom.w..c * plane + (iy as usize + 1) * geom.w];
                        for ox in 0..geom.w_out {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < geom.w as isize {
                                dst[oy * geom.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let sites = geom.sites();
    let plane = geom.h * geom.w;
    for c in 0..geom.c_in {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                let src = &dcols[row * sites..(row + 1) * sites];
                for oy in 0..geom.h_out {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for ox in 0..geom.w_out {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            dx[c * plane + iy as usize * geom.w + ix as usize] += src[oy * geom.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
