//! Forward kernels shared by the plain tensor API and the tape.

use crate::error::{Result, SubstrateError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Additive mask value for blocked attention entries.
pub const MASK_BLOCKED: f64 = -1e9;

/// Epsilon in the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention visibility pattern applied inside each group.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask<R> {
    /// Every key is visible.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Explicit additive `[L, L]` mask: 0 allowed, [`MASK_BLOCKED`] blocked.
    Additive(Tensor<R>),
}

impl<R: Real> AttnMask<R> {
    #[inline]
    fn entry(&self, i: usize, j: usize, len: usize) -> Option<R> {
        match self {
            AttnMask::Full => Some(R::zero()),
            AttnMask::Causal => (j <= i).then(R::zero),
            AttnMask::Additive(m) => {
                let v = m.data()[i * len + j];
                (v > R::lit(MASK_BLOCKED * 0.5)).then_some(v)
            }
        }
    }
}

/// `[t, t]` additive causal mask.
pub fn causal_mask<R: Real>(t: usize) -> Tensor<R> {
    Tensor::from_fn(&[t, t], |idx| {
        let (i, j) = (idx / t, idx % t);
        if j <= i {
            R::zero()
        } else {
            R::lit(MASK_BLOCKED)
        }
    })
}

fn ensure_finite<R: Real>(x: &Tensor<R>, op: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(SubstrateError::NonFinite { op })
    }
}

pub(crate) fn softmax_row_into<R: Real>(row: &[R], out: &mut [R]) {
    let max = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
    let mut sum = R::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis, stabilised by subtracting the row maximum.
pub fn softmax_rows<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    if x.last_dim() == 0 {
        return Err(SubstrateError::InvalidArgument {
            op: "softmax_rows",
            reason: "last extent must be at least 1".into(),
        });
    }
    ensure_finite(x, "softmax_rows")?;
    let k = x.last_dim();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        softmax_row_into(src, dst);
    }
    Ok(out)
}

/// Log-softmax over the last axis.
pub fn log_softmax_rows<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    ensure_finite(x, "log_softmax_rows")?;
    let k = x.last_dim();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        let max = src.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
        let lse = src.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = v - lse;
        }
    }
    Ok(out)
}

pub(crate) struct LayerNormCache<R> {
    pub xhat: Vec<R>,
    pub rstd: Vec<R>,
}

pub(crate) fn layer_norm_fwd<R: Real>(
    x: &Tensor<R>,
    gain: &[R],
    bias: &[R],
) -> (Tensor<R>, LayerNormCache<R>) {
    let d = x.last_dim();
    let rows = x.rows();
    let eps = R::lit(LAYER_NORM_EPS);
    let inv_d = R::one() / R::lit(d as f64);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![R::zero(); x.len()];
    let mut rstd = vec![R::zero(); rows];
    for r in 0..rows {
        let src = x.row(r);
        let mean = src.iter().copied().sum::<R>() * inv_d;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
        let rs = R::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out.data_mut()[r * d..(r + 1) * d];
        for c in 0..d {
            xh[c] = (src[c] - mean) * rs;
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Layer normalisation over the last axis with learnable gain and bias.
pub fn layer_norm<R: Real>(x: &Tensor<R>, gain: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let d = x.last_dim();
    if d < 2 {
        return Err(SubstrateError::InvalidArgument {
            op: "layer_norm",
            reason: format!("normalised extent must be >= 2, got {d}"),
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(SubstrateError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    ensure_finite(x, "layer_norm")?;
    Ok(layer_norm_fwd(x, gain.data(), bias.data()).0)
}

/// Shape bookkeeping for grouped multi-head attention over `[groups * len, dim]` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: usize,
    pub len: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnLayout {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.groups * self.heads * self.len * self.len
    }
}

pub(crate) fn attention_fwd<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    layout: AttnLayout,
    mask: &AttnMask<R>,
) -> Result<(Vec<R>, Vec<R>)> {
    let AttnLayout { groups, len, heads, dim } = layout;
    let dh = layout.head_dim();
    let scale = R::one() / R::lit(dh as f64).sqrt();
    let mut out = vec![R::zero(); groups * len * dim];
    let mut probs = vec![R::zero(); layout.probs_len()];
    let mut scores = vec![R::zero(); len];
    let mut allowed = vec![false; len];
    for g in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            let pbase = (g * heads + h) * len * len;
            for i in 0..len {
                let qi = &q[(g * len + i) * dim + col..(g * len + i) * dim + col + dh];
                let mut max = R::neg_infinity();
                let mut any = false;
                for j in 0..len {
                    match mask.entry(i, j, len) {
                        Some(m) => {
                            let kj = &k[(g * len + j) * dim + col..(g * len + j) * dim + col + dh];
                            let mut s = R::zero();
                            for c in 0..dh {
                                s += qi[c] * kj[c];
                            }
                            let s = s * scale + m;
                            scores[j] = s;
                            allowed[j] = true;
                            max = max.max(s);
                            any = true;
                        }
                        None => allowed[j] = false,
                    }
                }
                if !any {
                    return Err(SubstrateError::FullyBlockedRow { row: i });
                }
                let prow = &mut probs[pbase + i * len..pbase + (i + 1) * len];
                let mut sum = R::zero();
                for j in 0..len {
                    if allowed[j] {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out[(g * len + i) * dim + col..(g * len + i) * dim + col + dh];
                for j in 0..len {
                    if allowed[j] {
                        prow[j] /= sum;
                        let p = prow[j];
                        let vj = &v[(g * len + j) * dim + col..(g * len + j) * dim + col + dh];
                        for c in 0..dh {
                            orow[c] += p * vj[c];
                        }
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Single-head attention `softmax(Q Kᵀ / sqrt(d) + mask) V` for `[T, d]` inputs.
///
/// Blocked entries receive exactly zero weight, so outputs never depend on
/// rows the mask hides.
pub fn masked_attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    mask: &Tensor<R>,
) -> Result<Tensor<R>> {
    if q.ndim() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(SubstrateError::ShapeMismatch {
            op: "masked_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    if mask.shape() != [t, t] {
        return Err(SubstrateError::ShapeMismatch {
            op: "masked_attention",
            lhs: vec![t, t],
            rhs: mask.shape().to_vec(),
        });
    }
    for x in [q, k, v] {
        ensure_finite(x, "masked_attention")?;
    }
    let layout = AttnLayout {
        groups: 1,
        len: t,
        heads: 1,
        dim: d,
    };
    let (out, _) = attention_fwd(q.data(), k.data(), v.data(), layout, &AttnMask::Additive(mask.clone()))?;
    Tensor::new(vec![t, d], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<R: Real>(x: R) -> R {
    let u = R::lit(GELU_C) * (x + R::lit(GELU_A) * x * x * x);
    R::lit(0.5) * x * (R::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::lit(GELU_C);
    let a = R::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    R::lit(0.5) * (R::one() + th)
        + R::lit(0.5) * x * (R::one() - th * th) * c * (R::one() + R::lit(3.0) * a * x * x)
}
