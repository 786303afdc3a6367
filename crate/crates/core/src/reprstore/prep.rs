use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{FeatureStore, StoreMeta, TokenKind, TokenSet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

const NORM_EPS: f64 = 1e-12;

/// `v/‖v‖₂`, or `v` unchanged when `‖v‖₂ ≤ 1e-12`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("feature vector passed to l2_normalize".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Zero-pads `v` to `width` entries.
pub fn pad_to_width(v: &[f64], width: usize) -> Result<Vec<f64>> {
    if v.len() > width {
        return Err(Error::Shape(format!(
            "cannot pad a {}-dim vector to width {}",
            v.len(),
            width
        )));
    }
    let mut out = v.to_vec();
    out.resize(width, 0.0);
    Ok(out)
}

/// Which encoder layers feed a probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerScheme {
    Last,
    MidPlusLast,
    Quarterly,
    All,
    /// 1-based layer indices.
    Custom(Vec<usize>),
}

impl fmt::Display for LayerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerScheme::Last => f.write_str("last"),
            LayerScheme::MidPlusLast => f.write_str("mid+last"),
            LayerScheme::Quarterly => f.write_str("quarterly"),
            LayerScheme::All => f.write_str("all"),
            LayerScheme::Custom(v) => {
                let parts: Vec<String> = v.iter().map(|l| l.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LayerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "last" => Ok(LayerScheme::Last),
            "mid+last" | "mid-last" | "midlast" => Ok(LayerScheme::MidPlusLast),
            "quarterly" => Ok(LayerScheme::Quarterly),
            "all" => Ok(LayerScheme::All),
            other => other
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("unknown layer scheme '{s}'")))
                })
                .collect::<Result<Vec<_>>>()
                .map(LayerScheme::Custom),
        }
    }
}

impl From<LayerScheme> for String {
    fn from(l: LayerScheme) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LayerScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Sorted, distinct 1-based layer indices for a scheme.
pub fn resolve_layers(num_layers: usize, scheme: &LayerScheme) -> Result<Vec<usize>> {
    if num_layers == 0 {
        return Err(Error::Config("a store needs at least one layer".into()));
    }
    let l = num_layers;
    let mut out: Vec<usize> = match scheme {
        LayerScheme::Last => vec![l],
        LayerScheme::MidPlusLast => vec![l.div_ceil(2), l],
        LayerScheme::Quarterly => (1..=4)
            .map(|q| (l as f64 * q as f64 / 4.0).round() as usize)
            .filter(|&i| i >= 1)
            .collect(),
        LayerScheme::All => (1..=l).collect(),
        LayerScheme::Custom(v) => {
            if let Some(bad) = v.iter().find(|&&i| i == 0 || i > l) {
                return Err(Error::Config(format!(
                    "layer {bad} out of range [1, {l}]"
                )));
            }
            if v.is_empty() {
                return Err(Error::Config("empty custom layer list".into()));
            }
            v.clone()
        }
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Identity of one row of a stacked representation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowTag {
    pub layer: usize,
    pub kind: TokenKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.patch {
            Some(p) => write!(f, "{}@{}#{}", self.kind, self.layer, p),
            None => write!(f, "{}@{}", self.kind, self.layer),
        }
    }
}

/// Row order for a layer set and token kinds.
///
/// Summary-only sets give all `CLS` rows in ascending layer order followed by
/// all `AP` rows. Sets with `PATCH` give, per layer in ascending order, the
/// selected summary tokens then every patch token; `{CLS, PATCH}` over the
/// last layer is the all-token layout with `P + 1` rows.
pub fn row_layout(meta: &StoreMeta, layers: &[usize], tokens: TokenSet) -> Result<Vec<RowTag>> {
    if tokens.is_empty() {
        return Err(Error::Config("no token kinds selected".into()));
    }
    for kind in tokens.kinds() {
        if !meta.has_kind(kind) {
            return Err(Error::Config(format!(
                "store '{}' has no {} tokens",
                meta.model_id, kind
            )));
        }
    }
    if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > meta.num_layers) {
        return Err(Error::Config(format!(
            "layer {bad} out of range [1, {}]",
            meta.num_layers
        )));
    }
    let tag = |layer, kind| RowTag {
        layer,
        kind,
        patch: None,
    };
    let mut rows = Vec::new();
    if tokens.patch {
        for &layer in layers {
            if tokens.cls {
                rows.push(tag(layer, TokenKind::Cls));
            }
            if tokens.ap {
                rows.push(tag(layer, TokenKind::Ap));
            }
            rows.extend((0..meta.num_patches).map(|p| RowTag {
                layer,
                kind: TokenKind::Patch,
                patch: Some(p),
            }));
        }
    } else {
        for kind in [TokenKind::Cls, TokenKind::Ap] {
            if tokens.contains(kind) {
                rows.extend(layers.iter().map(|&l| tag(l, kind)));
            }
        }
    }
    Ok(rows)
}

/// Widest native feature width among the layers referenced by `rows`.
pub fn rows_width(meta: &StoreMeta, rows: &[RowTag]) -> usize {
    rows.iter().map(|r| meta.dim(r.layer)).max().unwrap_or(0)
}

/// Stacked per-sample representations `[B × R × d_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedBatch {
    pub h: Tensor,
    pub rows: Vec<RowTag>,
    pub labels: Vec<u32>,
}

impl StackedBatch {
    pub fn batch_size(&self) -> usize {
        self.h.shape()[0]
    }
}

/// Gathers `rows` for the given samples, L2-normalizing each token vector at
/// its native width and zero-padding it to `width`.
pub fn assemble_rows(
    store: &FeatureStore,
    split: &str,
    indices: &[usize],
    rows: &[RowTag],
    width: usize,
) -> Result<StackedBatch> {
    let data = store.split(split)?;
    for r in rows {
        if !store.has_tensor(split, r.kind, r.layer) {
            return Err(Error::Config(format!(
                "store '{}' has no {} tokens for layer {} in split '{}'",
                store.meta.model_id, r.kind, r.layer, split
            )));
        }
        if store.meta.dim(r.layer) > width {
            return Err(Error::Shape(format!(
                "layer {} width {} exceeds stack width {}",
                r.layer,
                store.meta.dim(r.layer),
                width
            )));
        }
    }
    let n = data.len();
    if let Some(bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Data(format!(
            "sample index {bad} out of range for split '{split}' with {n} samples"
        )));
    }

    let r_count = rows.len();
    let mut h = vec![0.0; indices.len() * r_count * width];
    for (bi, &sample) in indices.iter().enumerate() {
        for (ri, tag) in rows.iter().enumerate() {
            let src = store.token(data, tag.kind, tag.layer, sample, tag.patch.unwrap_or(0));
            let dst = &mut h[(bi * r_count + ri) * width..][..src.len()];
            let norm = src.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let scale = if norm > NORM_EPS { 1.0 / norm } else { 1.0 };
            for (d, s) in dst.iter_mut().zip(src) {
                *d = f64::from(*s) * scale;
            }
        }
    }
    Ok(StackedBatch {
        h: Tensor::from_vec(&[indices.len(), r_count, width], h)?,
        rows: rows.to_vec(),
        labels: indices.iter().map(|&i| data.labels[i]).collect(),
    })
}

/// Builds the stacked representation for a layer set and token kinds.
pub fn assemble_batch(
    store: &FeatureStore,
    split: &str,
    indices: &[usize],
    layers: &[usize],
    tokens: TokenSet,
) -> Result<StackedBatch> {
    let rows = row_layout(&store.meta, layers, tokens)?;
    let width = rows_width(&store.meta, &rows);
    assemble_rows(store, split, indices, &rows, width)
}

/// Per-class stratified train/validation split, sorted ascending.
///
/// Each class with `n_c ≥ 2` sends `round(n_c·f)` samples to validation,
/// clamped to `[1, n_c − 1]`; singleton classes stay in training.
pub fn stratified_split(labels: &[u32], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} not in (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = RngStream::new(seed, "split");
    let mut train = Vec::with_capacity(labels.len());
    let mut val = Vec::new();
    for (_, mut idx) in by_class {
        let n = idx.len();
        let take = if n < 2 {
            0
        } else {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        };
        rng.shuffle(&mut idx);
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
