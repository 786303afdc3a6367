use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::reprstore::{FeatureStore, TokenKind};
use crate::rng::RngStream;

pub const CKA_MAX_ROWS: usize = 2000;
const MEDIAN_GUARD: f64 = 1e-12;

/// RBF bandwidth: a fraction of the median pairwise distance, or absolute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Bandwidth {
    MedianFraction(f64),
    Absolute(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::MedianFraction(0.2)
    }
}

fn sq_dists(x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (n, p) = x.dims2()?;
    let d = x.data();
    let rows = par::map_range(n, |i| {
        let xi = &d[i * p..(i + 1) * p];
        (0..n)
            .map(|j| {
                let xj = &d[j * p..(j + 1) * p];
                xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Ok((n, rows.concat()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Doubly centered RBF kernel matrix.
fn centered_kernel(x: &Tensor, bw: Bandwidth) -> Result<Vec<f64>> {
    let (n, d2) = sq_dists(x)?;
    let sigma = match bw {
        Bandwidth::MedianFraction(f) => {
            let mut upper = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    upper.push(d2[i * n + j].sqrt());
                }
            }
            f * median(upper).max(MEDIAN_GUARD)
        }
        Bandwidth::Absolute(s) => s,
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("RBF bandwidth must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = d2.iter().map(|v| (-v / denom).exp()).collect();
    let row_mean: Vec<f64> = k.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_mean[i] - row_mean[j];
        }
    }
    Ok(k)
}

fn frob(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centered kernel alignment between paired rows of `x` `[N × p]` and
/// `y` `[N × q]` under RBF kernels.
pub fn cka_rbf(x: &Tensor, y: &Tensor, bw: Bandwidth) -> Result<f64> {
    let (n, _) = x.dims2()?;
    let (ny, _) = y.dims2()?;
    if n != ny {
        return Err(Error::Shape(format!("CKA inputs have {n} and {ny} rows")));
    }
    if n < 3 {
        return Err(Error::Data(format!("CKA needs at least 3 samples, got {n}")));
    }
    let kx = centered_kernel(x, bw)?;
    let ky = centered_kernel(y, bw)?;
    let den = (frob(&kx, &kx) * frob(&ky, &ky)).sqrt();
    if !(den > 0.0) {
        return Err(Error::Data("zero-variance representation".into()));
    }
    Ok(frob(&kx, &ky) / den)
}

fn layer_matrix(store: &FeatureStore, split: &str, kind: TokenKind, layer: usize, rows: &[usize]) -> Result<Tensor> {
    let data = store.split(split)?;
    let d = store.meta.dim(layer);
    let mut out = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        out.extend(store.token(data, kind, layer, i, 0).iter().map(|&v| f64::from(v)));
    }
    Tensor::from_vec(&[rows.len(), d], out)
}

/// CKA of every layer's `kind` representation against `reference_layer`
/// (default: the last layer), on a seeded subsample of at most
/// [`CKA_MAX_ROWS`] samples.
pub fn layer_similarity_curve(
    store: &FeatureStore,
    split: &str,
    kind: TokenKind,
    reference_layer: Option<usize>,
    bw: Bandwidth,
    seed: u64,
) -> Result<Vec<f64>> {
    if kind == TokenKind::Patch {
        return Err(Error::Config("CKA curves are defined for CLS or AP tokens".into()));
    }
    let num_layers = store.meta.num_layers;
    let reference = reference_layer.unwrap_or(num_layers);
    if reference == 0 || reference > num_layers {
        return Err(Error::Config(format!("reference layer {reference} not in 1..={num_layers}")));
    }
    for l in 1..=num_layers {
        if !store.has_tensor(split, kind, l) {
            return Err(Error::Config(format!(
                "store '{}' has no {kind} tokens for layer {l} in split '{split}'",
                store.meta.model_id
            )));
        }
    }
    let n = store.split(split)?.len();
    let mut rows: Vec<usize> = (0..n).collect();
    if n > CKA_MAX_ROWS {
        RngStream::new(seed, "cka").shuffle(&mut rows);
        rows.truncate(CKA_MAX_ROWS);
        rows.sort_unstable();
    }
    let reference_x = layer_matrix(store, split, kind, reference, &rows)?;
    let ky = centered_kernel(&reference_x, bw)?;
    let ky_norm = frob(&ky, &ky);
    (1..=num_layers)
        .map(|l| {
            let x = layer_matrix(store, split, kind, l, &rows)?;
            let kx = centered_kernel(&x, bw)?;
            let den = (frob(&kx, &kx) * ky_norm).sqrt();
            if !(den > 0.0) {
                return Err(Error::Data("zero-variance representation".into()));
            }
            Ok(frob(&kx, &ky) / den)
        })
        .collect()
}
