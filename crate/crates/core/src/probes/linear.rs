//! Linear classifier on the flattened stacked rows.

use super::attentive::check_params;
use super::{ForwardCache, ForwardOutput, ProbeLayout, INIT_STD};
use crate::diffcore::{linear_backward, linear_forward, Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub layout: ProbeLayout,
    /// `w_clf [(R·d) × K]`, `b_clf [K]`.
    pub params: Vec<Param>,
}

impl LinearProbe {
    pub fn init(layout: &ProbeLayout, rng: &mut RngStream) -> Result<Self> {
        let n = layout.num_rows() * layout.d_model;
        let k = layout.num_classes;
        let w = Tensor::from_vec(&[n, k], (0..n * k).map(|_| INIT_STD * rng.normal()).collect())?;
        Ok(LinearProbe {
            layout: layout.clone(),
            params: vec![Param::new("w_clf", w), Param::new("b_clf", Tensor::zeros(&[k]))],
        })
    }

    pub fn from_params(layout: &ProbeLayout, params: Vec<Param>) -> Result<Self> {
        let template = Self::init(layout, &mut RngStream::new(0, "shape-template"))?;
        check_params(&template.params, &params)?;
        Ok(LinearProbe {
            layout: layout.clone(),
            params,
        })
    }

    /// `flatten(H)·W + b`, flattening rows in stacking order.
    pub fn forward(&self, h: &Tensor) -> Result<ForwardOutput> {
        let (b, r, d) = h.dims3()?;
        if r != self.layout.num_rows() || d != self.layout.d_model {
            return Err(Error::Shape(format!(
                "probe expects [B × {} × {}], batch is {:?}",
                self.layout.num_rows(),
                self.layout.d_model,
                h.shape()
            )));
        }
        let x = h.clone().reshape(&[b, r * d])?;
        let logits = linear_forward(&x, &self.params[0].value, &self.params[1].value)?;
        Ok(ForwardOutput {
            logits,
            attn: None,
            cache: ForwardCache::Linear { x },
            score_entries: 0,
        })
    }

    pub fn backward(&self, x: &Tensor, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let (_, dw, db) = linear_backward(x, &self.params[0].value, dlogits)?;
        Ok(vec![dw, db])
    }
}
