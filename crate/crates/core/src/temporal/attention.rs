//! Three pre-activation-free self-attention blocks over frame tokens, with a
//! hand-written reverse pass.
//!
//! Block: `h <- h + s_a * (MHA(h) Wo)`, then `h <- h + s_f * (gelu(h W1) W2)`.
//! There are no biases and no normalization layers. The sequence output is
//! `x + (h_L - h_0)` with `h_0 = x + rho`, so zero output projections return
//! the input tokens bit for bit.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::encoding::encoding_for_times;
use crate::error::{Error, Result};

pub const LAYERS: usize = 3;
pub const DEFAULT_HEADS: usize = 4;
pub const FF_EXPANSION: usize = 4;

/// Per-frame tokens, `T × d`, and the time stamp of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: DMatrix<f64>,
    pub frame_times: Vec<f64>,
}

impl TokenSequence {
    /// Frames stamped with their index.
    pub fn new(tokens: DMatrix<f64>) -> Self {
        let frame_times = (0..tokens.nrows()).map(|t| t as f64).collect();
        Self { tokens, frame_times }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    /// Layer scales, stored as `1 × d` rows.
    pub scale_attn: DMatrix<f64>,
    pub scale_ff: DMatrix<f64>,
}

impl Block {
    pub const TENSOR_NAMES: [&'static str; 8] = ["wq", "wk", "wv", "wo", "w1", "w2", "scale_attn", "scale_ff"];

    pub(super) fn zeros(d: usize) -> Self {
        let sq = || DMatrix::zeros(d, d);
        Self {
            wq: sq(),
            wk: sq(),
            wv: sq(),
            wo: sq(),
            w1: DMatrix::zeros(d, FF_EXPANSION * d),
            w2: DMatrix::zeros(FF_EXPANSION * d, d),
            scale_attn: DMatrix::zeros(1, d),
            scale_ff: DMatrix::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> [&DMatrix<f64>; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2, &self.scale_attn, &self.scale_ff]
    }

    pub fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.scale_attn,
            &mut self.scale_ff,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub blocks: Vec<Block>,
}

impl AttentionParams {
    /// Random query/key/value and first feed-forward weights (std `1/sqrt(fan_in)`),
    /// zero output projections, unit layer scales.
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_shape(d, heads)?;
        let normal = |fan_in: usize| Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        let blocks = (0..LAYERS)
            .map(|_| {
                let mut b = Block::zeros(d);
                let n = normal(d);
                for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.w1] {
                    w.iter_mut().for_each(|x| *x = n.sample(rng));
                }
                b.scale_attn.fill(1.0);
                b.scale_ff.fill(1.0);
                b
            })
            .collect();
        Ok(Self { d, heads, blocks })
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            d: self.d,
            heads: self.heads,
            blocks: (0..self.blocks.len()).map(|_| Block::zeros(self.d)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.norm_squared()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.tensors_mut().into_iter().zip(other.tensors()) {
            x.zip_apply(y, |p, q| *p += a * q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.d, self.heads)?;
        let reference = self.zeros_like();
        for (t, r) in self.tensors().iter().zip(reference.tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter tensor is {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFiniteInput("attention parameters".into()));
        }
        Ok(())
    }
}

fn check_shape(d: usize, heads: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 || heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "token width {d} must be even and divisible by {heads} heads"
        )));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(mut s: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|x| *x = (*x - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

fn scale_cols(m: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= s[(0, j)];
    }
    out
}

fn col_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, a.ncols(), |_, j| a.column(j).dot(&b.column(j)))
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Attention weights per head, `T × T`.
    attn: Vec<DMatrix<f64>>,
    o: DMatrix<f64>,
    a: DMatrix<f64>,
    mid: DMatrix<f64>,
    u: DMatrix<f64>,
    g: DMatrix<f64>,
    f: DMatrix<f64>,
}

fn block_forward(b: &Block, heads: usize, h: &DMatrix<f64>) -> (DMatrix<f64>, BlockCache) {
    let (t, d) = h.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h * &b.wq;
    let k = h * &b.wk;
    let v = h * &b.wv;
    let mut o = DMatrix::zeros(t, d);
    let mut attn = Vec::with_capacity(heads);
    for head in 0..heads {
        let c = head * dh;
        let qh = q.columns(c, dh);
        let kh = k.columns(c, dh);
        let w = softmax_rows(qh * kh.transpose() * scale);
        o.columns_mut(c, dh).copy_from(&(&w * v.columns(c, dh)));
        attn.push(w);
    }
    let a = &o * &b.wo;
    let mid = h + scale_cols(&a, &b.scale_attn);
    let u = &mid * &b.w1;
    let g = u.map(gelu);
    let f = &g * &b.w2;
    let out = &mid + scale_cols(&f, &b.scale_ff);
    let cache = BlockCache {
        input: h.clone(),
        q,
        k,
        v,
        attn,
        o,
        a,
        mid,
        u,
        g,
        f,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to the block input.
fn block_backward(b: &Block, heads: usize, c: &BlockCache, dout: &DMatrix<f64>, grad: &mut Block) -> DMatrix<f64> {
    let d = c.input.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    grad.scale_ff += col_dot(dout, &c.f);
    let df = scale_cols(dout, &b.scale_ff);
    grad.w2 += c.g.transpose() * &df;
    let dg = &df * b.w2.transpose();
    let du = dg.zip_map(&c.u, |x, u| x * gelu_grad(u));
    grad.w1 += c.mid.transpose() * &du;
    let dmid = dout + &du * b.w1.transpose();

    grad.scale_attn += col_dot(&dmid, &c.a);
    let da = scale_cols(&dmid, &b.scale_attn);
    grad.wo += c.o.transpose() * &da;
    let dcat = &da * b.wo.transpose();

    let (t, _) = c.input.shape();
    let mut dq = DMatrix::zeros(t, d);
    let mut dk = DMatrix::zeros(t, d);
    let mut dv = DMatrix::zeros(t, d);
    for head in 0..heads {
        let col = head * dh;
        let w = &c.attn[head];
        let doh = dcat.columns(col, dh);
        let dw = doh * c.v.columns(col, dh).transpose();
        dv.columns_mut(col, dh).copy_from(&(w.transpose() * doh));
        let mut ds = w.component_mul(&dw);
        for (i, mut row) in ds.row_iter_mut().enumerate() {
            let r = row.sum();
            for j in 0..t {
                row[j] -= w[(i, j)] * r;
            }
        }
        ds *= scale;
        dq.columns_mut(col, dh).copy_from(&(&ds * c.k.columns(col, dh)));
        dk.columns_mut(col, dh).copy_from(&(ds.transpose() * c.q.columns(col, dh)));
    }
    let xt = c.input.transpose();
    grad.wq += &xt * &dq;
    grad.wk += &xt * &dk;
    grad.wv += &xt * &dv;
    dmid + dq * b.wq.transpose() + dk * b.wk.transpose() + dv * b.wv.transpose()
}

/// Forward pass keeping everything the reverse pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    caches: Vec<BlockCache>,
    pub output: DMatrix<f64>,
}

impl Forward {
    /// Attention weights of `layer`, one `T × T` row-stochastic matrix per head.
    pub fn attention_weights(&self, layer: usize) -> &[DMatrix<f64>] {
        &self.caches[layer].attn
    }
}

pub fn forward(seq: &TokenSequence, params: &AttentionParams) -> Result<Forward> {
    if seq.width() != params.d || seq.frame_times.len() != seq.len() || seq.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "token sequence is {}×{} with {} time stamps, parameters expect width {}",
            seq.len(),
            seq.width(),
            seq.frame_times.len(),
            params.d
        )));
    }
    let rho = encoding_for_times(&seq.frame_times, params.d)?;
    let h0 = &seq.tokens + &rho.rho;
    let mut h = h0.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(b, params.heads, &h);
        caches.push(cache);
        h = next;
    }
    let output = &seq.tokens + (h - h0);
    Ok(Forward { caches, output })
}

/// Refined tokens `z`.
pub fn attend(seq: &TokenSequence, params: &AttentionParams) -> Result<TokenSequence> {
    let fwd = forward(seq, params)?;
    Ok(TokenSequence {
        tokens: fwd.output,
        frame_times: seq.frame_times.clone(),
    })
}

/// Parameter gradient of a scalar loss with upstream gradient `dz` on the
/// refined tokens.
pub fn backward(params: &AttentionParams, fwd: &Forward, dz: &DMatrix<f64>) -> AttentionParams {
    let mut grad = params.zeros_like();
    let mut dh = dz.clone();
    for ((b, c), g) in params.blocks.iter().zip(&fwd.caches).zip(grad.blocks.iter_mut()).rev() {
        dh = block_backward(b, params.heads, c, &dh, g);
    }
    grad
}

/// Value and parameter gradient of
/// `sum_i loss(i, attend(seqs[i])) + weight_decay * |params|^2`.
///
/// `loss` returns the value and its gradient with respect to the refined
/// tokens. Sequences are processed in parallel and summed in index order.
pub fn gradient<F>(params: &AttentionParams, seqs: &[TokenSequence], loss: F, weight_decay: f64) -> Result<(f64, AttentionParams)>
where
    F: Fn(usize, &DMatrix<f64>) -> (f64, DMatrix<f64>) + Sync,
{
    let parts = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let fwd = forward(seq, params)?;
            let (value, dz) = loss(i, &fwd.output);
            Ok((value, backward(params, &fwd, &dz)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = weight_decay * params.squared_norm();
    let mut grad = params.zeros_like();
    grad.axpy(2.0 * weight_decay, params);
    for (value, g) in &parts {
        total += value;
        grad.axpy(1.0, g);
    }
    if !total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteGradient("attention parameters".into()));
    }
    Ok((total, grad))
}
