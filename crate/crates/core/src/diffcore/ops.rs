use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a [m×k]`, `b [m×n]`, giving `[k×n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a [m×n]`, `b [k×n]`, giving `[m×k]`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `X·W + b` with the bias broadcast over rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, n) = x.dims2()?;
    let (wn, m) = w.dims2()?;
    if wn != n || b.len() != m {
        return Err(Error::Shape(format!(
            "linear: X {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = matmul(x.data(), w.data(), rows, n, m);
    for row in out.chunks_mut(m.max(1)) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::from_vec(&[rows, m], out)
}

/// Gradients of `X·W + b` given `dOut`: `(dX, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, n) = x.dims2()?;
    let (wn, m) = w.dims2()?;
    let (drows, dm) = dout.dims2()?;
    if wn != n || drows != rows || dm != m {
        return Err(Error::Shape(format!(
            "linear backward: X {:?}, W {:?}, dOut {:?}",
            x.shape(),
            w.shape(),
            dout.shape()
        )));
    }
    let dx = matmul_a_bt(dout.data(), w.data(), rows, m, n);
    let dw = matmul_at_b(x.data(), dout.data(), rows, n, m);
    let mut db = vec![0.0; m];
    for row in dout.data().chunks(m.max(1)) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        Tensor::from_vec(&[rows, n], dx)?,
        Tensor::from_vec(&[n, m], dw)?,
        Tensor::from_vec(&[m], db)?,
    ))
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let (_, cols) = scores.dims2()?;
    let mut out = scores.clone();
    if cols > 0 {
        out.data_mut().chunks_mut(cols).for_each(softmax_in_place);
    }
    Ok(out)
}

/// Class-weighted softmax cross-entropy averaged over the batch, and its
/// gradient with respect to the logits.
pub fn weighted_ce(logits: &Tensor, labels: &[u32], weights: &[f64]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b || weights.len() != k {
        return Err(Error::Shape(format!(
            "cross-entropy: logits {:?}, {} labels, {} weights",
            logits.shape(),
            labels.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::Config(format!("class weight {w} is not positive")));
    }
    let mut grad = vec![0.0; b * k];
    if b == 0 {
        return Ok((0.0, Tensor::from_vec(&[0, k], grad)?));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (j, (&y, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        let y = y as usize;
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let w = weights[y];
        loss -= w * (row[y] - lse);
        let g = &mut grad[j * k..(j + 1) * k];
        for (gi, x) in g.iter_mut().zip(row) {
            *gi = w * inv_b * (x - lse).exp();
        }
        g[y] -= w * inv_b;
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, k], grad)?))
}

/// Inverse-frequency class weights `w_i = N / (K · n_i)`.
pub fn compute_class_weights(labels: &[u32], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        let y = y as usize;
        if y >= num_classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {c} has no training samples; merge or drop the class before training"
        )));
    }
    let n = labels.len() as f64;
    let k = num_classes as f64;
    Ok(counts.iter().map(|&c| n / (k * c as f64)).collect())
}

/// Gaussian representation jitter. In training mode a single Bernoulli(`prob`)
/// draw decides for the whole batch whether i.i.d. `N(0, sigma²)` noise is
/// added to every entry. Returns whether noise was applied.
pub fn apply_jitter(h: &mut Tensor, sigma: f64, prob: f64, rng: &mut RngStream, train: bool) -> bool {
    if !train {
        return false;
    }
    if !rng.bernoulli(prob) || sigma == 0.0 {
        return false;
    }
    for x in h.data_mut() {
        *x += sigma * rng.normal();
    }
    true
}
