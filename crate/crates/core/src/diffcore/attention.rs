//! Single-query scaled-dot-product attention with inverted dropout.

use super::ops::softmax_in_place;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Everything the backward pass needs, including the dropout mask drawn.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<f64>,
    /// Kept entries hold `1/(1-p)`, dropped entries hold 0.
    mask: Option<Vec<f64>>,
    scale: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[B×1×d_h]`
    pub out: Tensor,
    /// Pre-dropout softmax weights, `[B×R]`.
    pub attn: Tensor,
    pub cache: AttentionCache,
}

/// `softmax(Q·Kᵀ/√d_h)`, optionally dropped out, applied to `V`.
///
/// `q` is `[B×1×d_h]`, `k` and `v` are `[B×R×d_h]`. Dropout is active only
/// when `train` is set and `dropout_p > 0`; a mask stream must then be given.
pub fn attention_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    dropout_p: f64,
    train: bool,
    rng: Option<&mut RngStream>,
) -> Result<AttentionOutput> {
    let (b, one, dh) = q.dims3()?;
    let (kb, r, kdh) = k.dims3()?;
    if one != 1 || kb != b || kdh != dh || v.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if dh == 0 {
        return Err(Error::Shape("attention head dimension is zero".into()));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout probability {dropout_p} not in [0, 1)")));
    }
    let scale = 1.0 / (dh as f64).sqrt();

    let mut attn = vec![0.0; b * r];
    for bi in 0..b {
        let qrow = &q.data()[bi * dh..(bi + 1) * dh];
        let row = &mut attn[bi * r..(bi + 1) * r];
        for (ri, s) in row.iter_mut().enumerate() {
            let krow = &k.data()[(bi * r + ri) * dh..(bi * r + ri + 1) * dh];
            *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
        }
        softmax_in_place(row);
    }

    let mask = if train && dropout_p > 0.0 {
        let rng = rng.ok_or_else(|| Error::Config("dropout in training mode needs a random stream".into()))?;
        let keep = 1.0 / (1.0 - dropout_p);
        Some(
            (0..b * r)
                .map(|_| if rng.bernoulli(dropout_p) { 0.0 } else { keep })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut out = vec![0.0; b * dh];
    for bi in 0..b {
        let o = &mut out[bi * dh..(bi + 1) * dh];
        for ri in 0..r {
            let idx = bi * r + ri;
            let w = match &mask {
                Some(m) => attn[idx] * m[idx],
                None => attn[idx],
            };
            if w == 0.0 {
                continue;
            }
            let vrow = &v.data()[idx * dh..(idx + 1) * dh];
            for (oi, vi) in o.iter_mut().zip(vrow) {
                *oi += w * vi;
            }
        }
    }

    Ok(AttentionOutput {
        out: Tensor::from_vec(&[b, 1, dh], out)?,
        attn: Tensor::from_vec(&[b, r], attn.clone())?,
        cache: AttentionCache {
            q,
            k,
            v,
            attn,
            mask,
            scale,
        },
    })
}

/// Exact gradients `(dQ, dK, dV)` of [`attention_forward`] given `dOut`,
/// using the dropout mask recorded in the cache.
pub fn attention_backward(cache: &AttentionCache, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, r, dh) = cache.k.dims3()?;
    if dout.shape() != [b, 1, dh] {
        return Err(Error::Shape(format!(
            "stale cache: dOut {:?} does not match forward [{b}, 1, {dh}]",
            dout.shape()
        )));
    }
    let mut dq = vec![0.0; b * dh];
    let mut dk = vec![0.0; b * r * dh];
    let mut dv = vec![0.0; b * r * dh];
    let mut dattn = vec![0.0; r];
    for bi in 0..b {
        let g = &dout.data()[bi * dh..(bi + 1) * dh];
        for ri in 0..r {
            let idx = bi * r + ri;
            let m = cache.mask.as_ref().map_or(1.0, |m| m[idx]);
            let w = cache.attn[idx] * m;
            let vrow = &cache.v.data()[idx * dh..(idx + 1) * dh];
            let dvrow = &mut dv[idx * dh..(idx + 1) * dh];
            for (d, gi) in dvrow.iter_mut().zip(g) {
                *d = w * gi;
            }
            dattn[ri] = m * g.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>();
        }
        let a = &cache.attn[bi * r..(bi + 1) * r];
        let inner: f64 = a.iter().zip(&dattn).map(|(x, y)| x * y).sum();
        let qrow = &cache.q.data()[bi * dh..(bi + 1) * dh];
        let dqrow = &mut dq[bi * dh..(bi + 1) * dh];
        for ri in 0..r {
            let ds = a[ri] * (dattn[ri] - inner) * cache.scale;
            if ds == 0.0 {
                continue;
            }
            let idx = bi * r + ri;
            let krow = &cache.k.data()[idx * dh..(idx + 1) * dh];
            for (d, kv) in dqrow.iter_mut().zip(krow) {
                *d += ds * kv;
            }
            let dkrow = &mut dk[idx * dh..(idx + 1) * dh];
            for (d, qv) in dkrow.iter_mut().zip(qrow) {
                *d = ds * qv;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b, 1, dh], dq)?,
        Tensor::from_vec(&[b, r, dh], dk)?,
        Tensor::from_vec(&[b, r, dh], dv)?,
    ))
}
