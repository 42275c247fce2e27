//! Layers used by the model: convolution, pointwise projection, pooling, layer
//! norm, softmax, dropout and multi-head attention, plus their initializers.
//!
//! Layer structs hold graph handles ([`Var`]) for one forward pass; the backing
//! tensors live in a [`ParamSet`] and are bound per pass.

use rand::Rng;

use crate::error::{CastError, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state: train/eval switch plus a seeded counter so every dropout
/// site draws an independent, reproducible mask.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub mode: Mode,
    pub dropout: f64,
    seed: u64,
    calls: u64,
}

impl Ctx {
    pub fn new(mode: Mode, dropout: f64, seed: u64) -> Self {
        Self { mode, dropout, seed, calls: 0 }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0.0, 0)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        crate::seed::mix(self.seed, self.calls)
    }

    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let seed = self.next_seed();
        dropout(g, x, self.dropout, self.mode, seed)
    }
}

pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
    g.dropout(x, rate, mode == Mode::Train, seed)
}

// ---- parameter handles ------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Conv2dParams {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn bind<T: Real>(b: &Bound<'_, T>, prefix: &str, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self { kernel: b.var(&format!("{prefix}.kernel"))?, bias: b.var(&format!("{prefix}.bias"))?, stride, padding })
    }
}

/// `y = W x + b` applied to the trailing axis; `weight` is `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct PointwiseProj {
    pub weight: Var,
    pub bias: Var,
}

pub type Linear = PointwiseProj;

impl PointwiseProj {
    pub fn bind<T: Real>(b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self { weight: b.var(&format!("{prefix}.weight"))?, bias: b.var(&format!("{prefix}.bias"))? })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn bind<T: Real>(b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self { gamma: b.var(&format!("{prefix}.gamma"))?, beta: b.var(&format!("{prefix}.beta"))?, eps: LAYER_NORM_EPS })
    }
}

/// Query/key/value projections are stored as `[d, d]` matrices whose row blocks
/// of height `d / heads` are the per-head projections.
#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MhsaParams {
    pub fn bind<T: Real>(b: &Bound<'_, T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(b, &format!("{prefix}.q"))?,
            k: Linear::bind(b, &format!("{prefix}.k"))?,
            v: Linear::bind(b, &format!("{prefix}.v"))?,
            out: Linear::bind(b, &format!("{prefix}.out"))?,
            heads,
        })
    }
}

// ---- initialization ---------------------------------------------------------

/// Uniform in ±√(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform_with(shape, -bound, bound, rng)
}

pub fn init_linear<T: Real, R: Rng>(set: &mut ParamSet<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<()> {
    set.insert(format!("{prefix}.weight"), xavier_uniform(&[d_out, d_in], d_in, d_out, rng))?;
    set.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))
}

pub fn init_conv<T: Real, R: Rng>(
    set: &mut ParamSet<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let field = k * k;
    set.insert(format!("{prefix}.kernel"), xavier_uniform(&[c_out, c_in, k, k], c_in * field, c_out * field, rng))?;
    set.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))
}

pub fn init_layer_norm<T: Real>(set: &mut ParamSet<T>, prefix: &str, d: usize) -> Result<()> {
    set.insert(format!("{prefix}.gamma"), Tensor::new(&[d], crate::Fill::Ones)?)?;
    set.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

pub fn init_mhsa<T: Real, R: Rng>(set: &mut ParamSet<T>, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(CastError::config(format!("width {d} is not divisible by {heads} heads")));
    }
    for part in ["q", "k", "v", "out"] {
        init_linear(set, &format!("{prefix}.{part}"), d, d, rng)?;
    }
    Ok(())
}

// ---- layers -----------------------------------------------------------------

pub fn conv2d<T: Real>(g: &mut Graph<T>, input: Var, p: &Conv2dParams) -> Result<Var> {
    g.conv2d(input, p.kernel, p.bias, p.stride, p.padding)
}

/// Row-wise `x Wᵀ + b` for `x` of shape `[n, in]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, p: &Linear) -> Result<Var> {
    let y = g.matmul_nt(x, p.weight)?;
    g.add(y, p.bias)
}

/// Applies a `[d, C]` projection at every spatial site of a `[C, H, W]` or
/// `[N, C, H, W]` map.
pub fn pointwise_project<T: Real>(g: &mut Graph<T>, fmap: Var, p: &PointwiseProj) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    let (n, c, h, w) = match s[..] {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(CastError::shape(format!("pointwise_project expects a feature map, got {s:?}"))),
    };
    let ws = g.shape(p.weight).to_vec();
    if ws.len() != 2 || ws[1] != c {
        return Err(CastError::shape(format!("projection weight {ws:?} for {c} channels")));
    }
    let d = ws[0];
    let sites = channels_last(g, fmap)?;
    let y = linear(g, sites, p)?;
    let y = g.reshape(y, &[n, h * w, d])?;
    let y = g.permute(y, &[0, 2, 1])?;
    if s.len() == 3 {
        g.reshape(y, &[d, h, w])
    } else {
        g.reshape(y, &[n, d, h, w])
    }
}

/// `[N, C, H, W]` (or `[C, H, W]`) to a `[N·H·W, C]` matrix of channel fibers,
/// sites in row-major order within each frame.
pub fn channels_last<T: Real>(g: &mut Graph<T>, fmap: Var) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    let (n, c, h, w) = match s[..] {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(CastError::shape(format!("expected a feature map, got {s:?}"))),
    };
    let x = g.reshape(fmap, &[n, c, h * w])?;
    let x = g.permute(x, &[0, 2, 1])?;
    g.reshape(x, &[n * h * w, c])
}

/// `[C, H, W] -> [C]` or `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(g: &mut Graph<T>, fmap: Var) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    match s[..] {
        [c, h, w] => {
            let x = g.reshape(fmap, &[c, h * w])?;
            g.mean_last(x)
        }
        [n, c, h, w] => {
            let x = g.reshape(fmap, &[n, c, h * w])?;
            g.mean_last(x)
        }
        _ => Err(CastError::shape(format!("global_avg_pool expects a feature map, got {s:?}"))),
    }
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &LayerNormParams) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, p.eps)
}

pub fn softmax_rows<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.softmax_last(x)
}

pub struct AttentionOut {
    pub output: Var,
    /// Per-head `[n_q, n_kv]` weights before dropout.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `queries` (`[n_q, d]`) over
/// `keys_values` (`[n_kv, d]`), with head concatenation and output projection.
/// `attn_dropout` applies the context's dropout to the attention weights.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys_values: Var,
    p: &MhsaParams,
    ctx: &mut Ctx,
    attn_dropout: bool,
) -> Result<AttentionOut> {
    let d = g.shape(queries)[1];
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(CastError::config(format!("width {d} is not divisible by {} heads", p.heads)));
    }
    let dh = d / p.heads;
    let q = linear(g, queries, &p.q)?;
    let k = linear(g, keys_values, &p.k)?;
    let v = linear(g, keys_values, &p.v)?;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_last(q, h * dh, dh)?, g.slice_last(k, h * dh, dh)?, g.slice_last(v, h * dh, dh)?)
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax_last(scores)?;
        weights.push(a);
        let a = if attn_dropout { ctx.dropout(g, a)? } else { a };
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
    let output = linear(g, cat, &p.out)?;
    Ok(AttentionOut { output, weights })
}

/// Self-attention over the rows of `x` (`[n, d]`), dropout on the attention weights.
pub fn mhsa<T: Real>(g: &mut Graph<T>, x: Var, p: &MhsaParams, ctx: &mut Ctx) -> Result<AttentionOut> {
    multi_head_attention(g, x, x, p, ctx, true)
}

/// Mean of the per-head weight matrices, computed outside the tape.
pub fn head_average<T: Real>(g: &Graph<T>, weights: &[Var]) -> Tensor<T> {
    let mut acc = g.value(weights[0]).clone();
    for &w in &weights[1..] {
        acc.data_mut().iter_mut().zip(g.value(w).data()).for_each(|(a, &b)| *a += b);
    }
    let inv = T::one() / T::c(weights.len() as f64);
    acc.data_mut().iter_mut().for_each(|a| *a = *a * inv);
    acc
}
