//! Central-difference gradient oracle.

use super::{Param, Tensor};
use crate::error::Result;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates sampled when the model is larger than this (never below 200).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: 400,
            seed: 0,
        }
    }
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences over a random coordinate subsample and returns
/// `max |analytic − numeric| / max(|numeric|, 1e-8)`.
///
/// `loss_fn` must be deterministic (any dropout masks frozen).
pub fn finite_difference_check<F>(mut loss_fn: F, params: &mut [Param], check: GradCheck) -> Result<f64>
where
    F: FnMut(&[Param]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = loss_fn(params)?;
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.len()).map(move |i| (pi, i)))
        .collect();
    let budget = check.max_coords.max(200);
    if coords.len() > budget {
        let mut rng = RngStream::new(check.seed, "gradcheck");
        rng.shuffle(&mut coords);
        coords.truncate(budget);
    }

    let h = check.step;
    let mut worst: f64 = 0.0;
    for (pi, i) in coords {
        let orig = params[pi].value.data()[i];
        params[pi].value.data_mut()[i] = orig + h;
        let (plus, _) = loss_fn(params)?;
        params[pi].value.data_mut()[i] = orig - h;
        let (minus, _) = loss_fn(params)?;
        params[pi].value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[pi].data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = RngStream::new(1, "t");
        let mut params = vec![Param::new(
            "theta",
            Tensor::from_vec(&[300], (0..300).map(|_| rng.normal()).collect()).unwrap(),
        )];
        let err = finite_difference_check(
            |ps| {
                let t = &ps[0].value;
                let grad = Tensor::from_vec(t.shape(), t.data().iter().map(|x| 2.0 * x).collect())?;
                Ok((t.sq_norm(), vec![grad]))
            },
            &mut params,
            // central differences are exact for quadratics at any step
            GradCheck {
                step: 0.5,
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
