//! Forward kernels and the matching backward helpers used by the tape.
//!
//! Reductions run left to right in a fixed order so results are bitwise
//! reproducible for identical inputs.

use crate::error::{shape_err, ApexError, Result};

use super::{gemm, MatMut, MatRef, Real, Tensor};

/// Pointwise nonlinearity applied to the gate projection of the FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(ApexError::Config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let c = T::lit(0.797_884_560_802_865_4);
                let inner = c * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let c = T::lit(0.797_884_560_802_865_4);
                let a = T::lit(0.044715);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Matrix product `a[m x k] * b[k x n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        T::zero(),
        &mut MatMut::new(&mut out, m, n),
    )?;
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = x.shape2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `dx = y * (dy - sum(dy * y))` per row.
pub(crate) fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot = yr.iter().zip(dyr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// RMS normalisation over the last dimension: `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    Ok(rms_norm_with_stats(x, gain, eps)?.0)
}

pub(crate) fn rms_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(shape_err!("rms_norm gain length {} vs last dim {d}", gain.len()));
    }
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    let dt = T::lit(d as f64);
    for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / dt;
        let denom = (ms + eps).sqrt();
        // An all-zero row with eps = 0 maps to zero rather than NaN.
        let r = if denom > T::zero() { T::one() / denom } else { T::zero() };
        inv.push(r);
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain.data()) {
            *y = v * r * g;
        }
    }
    Ok((Tensor::from_parts(x.dims().to_vec(), out), inv))
}

/// Returns `(dx, dgain)`.
pub(crate) fn rms_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let dt = T::lit(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); d];
    for (((xr, dyr), dxr), &r) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).zip(inv) {
        let mut dot = T::zero();
        for j in 0..d {
            let gdy = gain[j] * dyr[j];
            dot = dot + gdy * xr[j];
            dg[j] = dg[j] + dyr[j] * xr[j] * r;
        }
        let coef = dot * r * r * r / dt;
        for j in 0..d {
            dxr[j] = gain[j] * dyr[j] * r - xr[j] * coef;
        }
    }
    (dx, dg)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| Activation::Silu.apply(v))
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| Activation::Gelu.apply(v))
}

/// Mean token negative log-likelihood with log-sum-exp stabilisation.
pub fn cross_entropy_mean<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_probs(logits, targets)?.0)
}

pub(crate) fn cross_entropy_with_probs<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    let (n, v) = logits.shape2()?;
    if targets.len() != n {
        return Err(shape_err!("{} targets for {n} logit rows", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(ApexError::Index(format!("target {t} outside vocabulary of {v}")));
    }
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (row, &t) in probs.chunks_mut(v).zip(targets) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for x in row.iter() {
            sum = sum + (*x - max).exp();
        }
        let lse = max + sum.ln();
        total = total + (lse - row[t]);
        for x in row.iter_mut() {
            *x = (*x - lse).exp();
        }
    }
    Ok((total / T::lit(n as f64), probs))
}

/// Causal (optional) multi-head attention over `seqs` sequences packed row-wise.
///
/// `q`, `k`, `v` are `[seqs*seq_len x d_model]`; the output holds the
/// concatenated head outputs in the same layout. Returns the attention
/// probabilities `[seqs x heads x seq_len x seq_len]` for backward.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d_model: usize,
    heads: usize,
    seq_len: usize,
    causal: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let rows = q.len() / d_model;
    if rows % seq_len != 0 || d_model % heads != 0 {
        return Err(shape_err!("attention rows {rows}, seq_len {seq_len}, heads {heads}"));
    }
    let seqs = rows / seq_len;
    let dh = d_model / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let ll = seq_len * seq_len;
    let mut probs = vec![T::zero(); seqs * heads * ll];
    let mut out = vec![T::zero(); q.len()];
    for s in 0..seqs {
        let base = s * seq_len * d_model;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &mut probs[(s * heads + h) * ll..(s * heads + h + 1) * ll];
            let qh = MatRef::strided(q, off, seq_len, dh, d_model, 1);
            let kh = MatRef::strided(k, off, seq_len, dh, d_model, 1);
            gemm(scale, qh, kh.t(), T::zero(), &mut MatMut::new(p, seq_len, seq_len))?;
            for (i, row) in p.chunks_mut(seq_len).enumerate() {
                if causal {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                } else {
                    softmax_in_place(row);
                }
            }
            let vh = MatRef::strided(v, off, seq_len, dh, d_model, 1);
            let mut oh = MatMut::strided(&mut out, off, seq_len, dh, d_model, 1);
            gemm(T::one(), MatRef::new(p, seq_len, seq_len), vh, T::zero(), &mut oh)?;
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)` for [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    d_model: usize,
    heads: usize,
    seq_len: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let rows = q.len() / d_model;
    let seqs = rows / seq_len;
    let dh = d_model / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let ll = seq_len * seq_len;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); ll];
    for s in 0..seqs {
        let base = s * seq_len * d_model;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &probs[(s * heads + h) * ll..(s * heads + h + 1) * ll];
            let doh = MatRef::strided(dout, off, seq_len, dh, d_model, 1);
            let vh = MatRef::strided(v, off, seq_len, dh, d_model, 1);
            // dV = P^T dO
            gemm(
                T::one(),
                MatRef::new(p, seq_len, seq_len).t(),
                doh,
                T::zero(),
                &mut MatMut::strided(&mut dv, off, seq_len, dh, d_model, 1),
            )?;
            // dP = dO V^T
            gemm(T::one(), doh, vh.t(), T::zero(), &mut MatMut::new(&mut dp, seq_len, seq_len))?;
            let ds = softmax_rows_backward(p, &dp, seq_len);
            let ds_ref = MatRef::new(&ds, seq_len, seq_len);
            let qh = MatRef::strided(q, off, seq_len, dh, d_model, 1);
            let kh = MatRef::strided(k, off, seq_len, dh, d_model, 1);
            gemm(scale, ds_ref, kh, T::zero(), &mut MatMut::strided(&mut dq, off, seq_len, dh, d_model, 1))?;
            gemm(scale, ds_ref.t(), qh, T::zero(), &mut MatMut::strided(&mut dk, off, seq_len, dh, d_model, 1))?;
        }
    }
    Ok((dq, dk, dv))
}

/// Sum of squares of each column group, per block of `rows_per_sample` rows.
///
/// Input `[samples*rows_per_sample x groups*width]`, output `[samples x groups]`.
pub(crate) fn group_sq_norms<T: Real>(
    x: &Tensor<T>,
    rows_per_sample: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.shape2()?;
    if rows % rows_per_sample != 0 || cols % width != 0 {
        return Err(shape_err!(
            "group norms of {rows}x{cols} with {rows_per_sample} rows per sample, width {width}"
        ));
    }
    let samples = rows / rows_per_sample;
    let groups = cols / width;
    let mut out = vec![T::zero(); samples * groups];
    for (r, row) in x.data().chunks(cols).enumerate() {
        let o = &mut out[(r / rows_per_sample) * groups..(r / rows_per_sample + 1) * groups];
        for (g, chunk) in row.chunks(width).enumerate() {
            o[g] = chunk.iter().fold(o[g], |acc, &v| acc + v * v);
        }
    }
    Ok(Tensor::from_parts(vec![samples, groups], out))
}

/// Population standard deviation across columns of the per-column means.
pub(crate) fn col_mean_std<T: Real>(x: &Tensor<T>) -> Result<(T, Vec<T>)> {
    let (rows, cols) = x.shape2()?;
    let mut means = vec![T::zero(); cols];
    for row in x.data().chunks(cols) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    let rt = T::lit(rows as f64);
    means.iter_mut().for_each(|m| *m = *m / rt);
    let ct = T::lit(cols as f64);
    let mu = means.iter().fold(T::zero(), |a, &m| a + m) / ct;
    let var = means.iter().fold(T::zero(), |a, &m| a + (m - mu) * (m - mu)) / ct;
    Ok((var.sqrt(), means))
}
