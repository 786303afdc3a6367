//! Multi-head cross-attention probe with a single learned query.
//!
//! Per head `m` (width `d_h = 2d/M`):
//!
//! ```text
//! K⁽ᵐ⁾ = H·W_key⁽ᵐ⁾ + b_key⁽ᵐ⁾     V⁽ᵐ⁾ = H·W_val⁽ᵐ⁾ + b_val⁽ᵐ⁾     Q⁽ᵐ⁾ = q·W_query⁽ᵐ⁾ + b_query⁽ᵐ⁾
//! head⁽ᵐ⁾ = dropout(softmax(Q⁽ᵐ⁾K⁽ᵐ⁾ᵀ/√d_h))·V⁽ᵐ⁾
//! z = [head⁽¹⁾ ⊕ … ⊕ head⁽ᴹ⁾]·W_out + b_out
//! h = gain ⊙ (z − mean(z)) / (std(z) + 1e-6) + bias
//! logits = h·W_clf + b_clf
//! ```
//!
//! The per-head projections are stored side by side as `[d × 2d]` matrices;
//! head `m` owns columns `m·d_h .. (m+1)·d_h`.
//!
//! `b_key` adds the same amount to every score of a head and cancels inside
//! the softmax. Scores are computed from `H·W_key` alone and the gradient of
//! `b_key` is exactly zero.

use super::{ForwardCache, ForwardOutput, ProbeLayout, INIT_STD};
use crate::diffcore::{
    attention_backward, attention_forward, linear_backward, linear_forward, matmul, matmul_at_b, AttentionCache,
    Param, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

const STD_EPS: f64 = 1e-6;

pub(crate) const QUERY: usize = 0;
pub(crate) const W_KEY: usize = 1;
pub(crate) const W_VAL: usize = 3;
pub(crate) const B_VAL: usize = 4;
pub(crate) const W_QUERY: usize = 5;
pub(crate) const B_QUERY: usize = 6;
pub(crate) const W_OUT: usize = 7;
pub(crate) const B_OUT: usize = 8;
pub(crate) const NORM_GAIN: usize = 9;
pub(crate) const NORM_BIAS: usize = 10;
pub(crate) const W_CLF: usize = 11;
pub(crate) const B_CLF: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveProbe {
    pub layout: ProbeLayout,
    pub params: Vec<Param>,
}

#[derive(Clone, Debug)]
pub struct AttentiveCache {
    /// Input rows flattened to `[B·R × d]`.
    x: Tensor,
    heads: Vec<AttentionCache>,
    /// Concatenated head outputs `[B × 2d]`.
    concat: Tensor,
    /// Standardized fused vectors `[B × d]`.
    xhat: Vec<f64>,
    std: Vec<f64>,
    /// Affine-normalized fused vectors `[B × d]`, the classifier input.
    fused: Tensor,
}

fn normal(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| INIT_STD * rng.normal()).collect()).expect("shape")
}

impl AttentiveProbe {
    pub fn init(layout: &ProbeLayout, rng: &mut RngStream) -> Result<Self> {
        let d = layout.d_model;
        let m = layout.num_heads;
        if d == 0 || m == 0 || !(2 * d).is_multiple_of(m) {
            return Err(Error::Config(format!(
                "2d = {} is not divisible by {} heads",
                2 * d,
                m
            )));
        }
        let k = layout.num_classes;
        let w = 2 * d;
        let params = vec![
            Param::new("query", normal(rng, &[d])),
            Param::new("w_key", normal(rng, &[d, w])),
            Param::new("b_key", Tensor::zeros(&[w])),
            Param::new("w_val", normal(rng, &[d, w])),
            Param::new("b_val", Tensor::zeros(&[w])),
            Param::new("w_query", normal(rng, &[d, w])),
            Param::new("b_query", Tensor::zeros(&[w])),
            Param::new("w_out", normal(rng, &[w, d])),
            Param::new("b_out", Tensor::zeros(&[d])),
            Param::new("norm_gain", Tensor::full(&[d], 1.0)),
            Param::new("norm_bias", Tensor::zeros(&[d])),
            Param::new("w_clf", normal(rng, &[d, k])),
            Param::new("b_clf", Tensor::zeros(&[k])),
        ];
        Ok(AttentiveProbe {
            layout: layout.clone(),
            params,
        })
    }

    /// Rebuilds a probe from stored arrays, checking names and shapes.
    pub fn from_params(layout: &ProbeLayout, params: Vec<Param>) -> Result<Self> {
        let mut rng = RngStream::new(0, "shape-template");
        let template = Self::init(layout, &mut rng)?;
        check_params(&template.params, &params)?;
        Ok(AttentiveProbe {
            layout: layout.clone(),
            params,
        })
    }

    fn p(&self, i: usize) -> &[f64] {
        self.params[i].value.data()
    }

    pub fn forward(&self, h: &Tensor, train: bool, mut rng: Option<&mut RngStream>) -> Result<ForwardOutput> {
        let (b, r, d) = h.dims3()?;
        let lay = &self.layout;
        if r != lay.num_rows() || d != lay.d_model {
            return Err(Error::Shape(format!(
                "probe expects [B × {} × {}], batch is {:?}",
                lay.num_rows(),
                lay.d_model,
                h.shape()
            )));
        }
        let m = lay.num_heads;
        let dh = lay.head_dim();
        let w = 2 * d;
        let p_drop = lay.config.attn_dropout;

        let x = h.clone().reshape(&[b * r, d])?;
        let keys = Tensor::from_vec(&[b * r, w], matmul(x.data(), self.p(W_KEY), b * r, d, w))?;
        let vals = linear_forward(&x, &self.params[W_VAL].value, &self.params[B_VAL].value)?;
        let mut q = matmul(self.p(QUERY), self.p(W_QUERY), 1, d, w);
        for (qi, bi) in q.iter_mut().zip(self.p(B_QUERY)) {
            *qi += bi;
        }

        let mut concat = vec![0.0; b * w];
        let mut attn = vec![0.0; b * m * r];
        let mut heads = Vec::with_capacity(m);
        for head in 0..m {
            let cols = head * dh..(head + 1) * dh;
            let qh: Vec<f64> = (0..b).flat_map(|_| q[cols.clone()].iter().copied()).collect();
            let gather = |src: &Tensor| -> Vec<f64> {
                src.data()
                    .chunks(w)
                    .flat_map(|row| row[cols.clone()].iter().copied())
                    .collect()
            };
            let out = attention_forward(
                Tensor::from_vec(&[b, 1, dh], qh)?,
                Tensor::from_vec(&[b, r, dh], gather(&keys))?,
                Tensor::from_vec(&[b, r, dh], gather(&vals))?,
                p_drop,
                train,
                rng.as_deref_mut(),
            )?;
            for bi in 0..b {
                concat[bi * w + head * dh..bi * w + (head + 1) * dh]
                    .copy_from_slice(&out.out.data()[bi * dh..(bi + 1) * dh]);
                attn[(bi * m + head) * r..(bi * m + head + 1) * r]
                    .copy_from_slice(&out.attn.data()[bi * r..(bi + 1) * r]);
            }
            heads.push(out.cache);
        }
        let concat = Tensor::from_vec(&[b, w], concat)?;

        let z = linear_forward(&concat, &self.params[W_OUT].value, &self.params[B_OUT].value)?;
        let gain = self.p(NORM_GAIN);
        let bias = self.p(NORM_BIAS);
        let mut xhat = vec![0.0; b * d];
        let mut std = vec![0.0; b];
        let mut fused = vec![0.0; b * d];
        for bi in 0..b {
            let zr = &z.data()[bi * d..(bi + 1) * d];
            let mean = zr.iter().sum::<f64>() / d as f64;
            let var = zr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = var.sqrt();
            std[bi] = s;
            let denom = s + STD_EPS;
            for j in 0..d {
                let xh = (zr[j] - mean) / denom;
                xhat[bi * d + j] = xh;
                fused[bi * d + j] = gain[j] * xh + bias[j];
            }
        }
        let fused = Tensor::from_vec(&[b, d], fused)?;
        let logits = linear_forward(&fused, &self.params[W_CLF].value, &self.params[B_CLF].value)?;

        Ok(ForwardOutput {
            logits,
            attn: Some(Tensor::from_vec(&[b, m, r], attn)?),
            cache: ForwardCache::Attentive(Box::new(AttentiveCache {
                x,
                heads,
                concat,
                xhat,
                std,
                fused,
            })),
            score_entries: b * m * r,
        })
    }

    pub fn backward(&self, cache: &AttentiveCache, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let lay = &self.layout;
        let d = lay.d_model;
        let w = 2 * d;
        let dh = lay.head_dim();
        let r = lay.num_rows();
        let (b, _) = cache.fused.dims2()?;
        if dlogits.shape() != [b, lay.num_classes] {
            return Err(Error::Shape(format!(
                "stale cache: dLogits {:?} for batch of {b}",
                dlogits.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();

        let (dfused, dw_clf, db_clf) = linear_backward(&cache.fused, &self.params[W_CLF].value, dlogits)?;
        grads[W_CLF] = dw_clf;
        grads[B_CLF] = db_clf;

        // affine standardization
        let gain = self.p(NORM_GAIN);
        let mut dz = vec![0.0; b * d];
        {
            let (dgain, dbias) = {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for bi in 0..b {
                    for j in 0..d {
                        let g = dfused.data()[bi * d + j];
                        dg[j] += g * cache.xhat[bi * d + j];
                        db[j] += g;
                    }
                }
                (dg, db)
            };
            grads[NORM_GAIN] = Tensor::from_vec(&[d], dgain)?;
            grads[NORM_BIAS] = Tensor::from_vec(&[d], dbias)?;
            for bi in 0..b {
                let s = cache.std[bi];
                let denom = s + STD_EPS;
                let xh = &cache.xhat[bi * d..(bi + 1) * d];
                let dxh: Vec<f64> = (0..d).map(|j| dfused.data()[bi * d + j] * gain[j]).collect();
                // c = xhat·denom; ∂s/∂c_j = c_j/(d·s)
                let proj: f64 = dxh.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>() * denom;
                let coef = if s > 0.0 { proj / (denom * denom * d as f64 * s) } else { 0.0 };
                let dc: Vec<f64> = (0..d).map(|j| dxh[j] / denom - coef * xh[j] * denom).collect();
                let mean_dc = dc.iter().sum::<f64>() / d as f64;
                for j in 0..d {
                    dz[bi * d + j] = dc[j] - mean_dc;
                }
            }
        }
        let dz = Tensor::from_vec(&[b, d], dz)?;
        let (dconcat, dw_out, db_out) = linear_backward(&cache.concat, &self.params[W_OUT].value, &dz)?;
        grads[W_OUT] = dw_out;
        grads[B_OUT] = db_out;

        let mut dkeys = vec![0.0; b * r * w];
        let mut dvals = vec![0.0; b * r * w];
        let mut dq = vec![0.0; w];
        for (head, hc) in cache.heads.iter().enumerate() {
            let off = head * dh;
            let dout: Vec<f64> = (0..b)
                .flat_map(|bi| dconcat.data()[bi * w + off..bi * w + off + dh].iter().copied())
                .collect();
            let (dqh, dkh, dvh) = attention_backward(hc, &Tensor::from_vec(&[b, 1, dh], dout)?)?;
            for bi in 0..b {
                for j in 0..dh {
                    dq[off + j] += dqh.data()[bi * dh + j];
                }
            }
            for row in 0..b * r {
                dkeys[row * w + off..row * w + off + dh].copy_from_slice(&dkh.data()[row * dh..(row + 1) * dh]);
                dvals[row * w + off..row * w + off + dh].copy_from_slice(&dvh.data()[row * dh..(row + 1) * dh]);
            }
        }
        let rows = b * r;
        grads[W_KEY] = Tensor::from_vec(&[d, w], matmul_at_b(cache.x.data(), &dkeys, rows, d, w))?;
        grads[W_VAL] = Tensor::from_vec(&[d, w], matmul_at_b(cache.x.data(), &dvals, rows, d, w))?;
        let col_sums = |g: &[f64]| {
            let mut out = vec![0.0; w];
            for row in g.chunks(w) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        };
        grads[B_VAL] = Tensor::from_vec(&[w], col_sums(&dvals))?;

        // q = query·W_query + b_query
        let query = self.p(QUERY);
        let wq = self.p(W_QUERY);
        let mut dwq = vec![0.0; d * w];
        let mut dquery = vec![0.0; d];
        for i in 0..d {
            for j in 0..w {
                dwq[i * w + j] = query[i] * dq[j];
                dquery[i] += wq[i * w + j] * dq[j];
            }
        }
        grads[W_QUERY] = Tensor::from_vec(&[d, w], dwq)?;
        grads[B_QUERY] = Tensor::from_vec(&[w], dq)?;
        grads[QUERY] = Tensor::from_vec(&[d], dquery)?;
        Ok(grads)
    }
}

pub(crate) fn check_params(template: &[Param], params: &[Param]) -> Result<()> {
    if template.len() != params.len() {
        return Err(Error::Format(format!(
            "expected {} parameter arrays, found {}",
            template.len(),
            params.len()
        )));
    }
    for (t, p) in template.iter().zip(params) {
        if t.name != p.name || t.value.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                p.name,
                p.value.shape(),
                t.name,
                t.value.shape()
            )));
        }
    }
    Ok(())
}
