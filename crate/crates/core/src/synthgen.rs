//! Deterministic synthetic feature stores.
//!
//! Class `c` is represented by `signal_strength · e_c` (the `c`-th standard
//! basis vector) plus isotropic Gaussian noise. A separable store puts that
//! signal in every (layer, kind) slot; a planted store puts it in a single
//! slot and fills the rest with class-independent noise. Every slot is drawn
//! from its own random stream, so a store is a pure function of its spec.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reprstore::{FeatureStore, SplitData, StoreMeta, TokenKind, TokenSet, DEFAULT_EXTRACTION_POINT, FORMAT_VERSION};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    #[serde(default)]
    pub n_val: usize,
    pub n_test: usize,
    pub num_layers: usize,
    /// One width for every layer, or one per layer.
    pub dims: Vec<usize>,
    #[serde(default)]
    pub num_patches: usize,
    /// Layers that store `PATCH` tokens; all layers when empty.
    #[serde(default)]
    pub patch_layers: Vec<usize>,
    pub tokens: TokenSet,
    pub num_classes: usize,
    #[serde(default)]
    pub planted_layer: Option<usize>,
    #[serde(default)]
    pub planted_kind: Option<TokenKind>,
    pub signal_strength: f64,
    pub noise_std: f64,
    #[serde(default = "one")]
    pub imbalance_ratio: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SynthSpec {
    /// Four classes, six layers of width 16, signal everywhere.
    pub fn separable(seed: u64) -> Self {
        SynthSpec {
            n_train: 400,
            n_val: 0,
            n_test: 200,
            num_layers: 6,
            dims: vec![16],
            num_patches: 0,
            patch_layers: vec![],
            tokens: TokenSet::CLS_AP,
            num_classes: 4,
            planted_layer: None,
            planted_kind: None,
            signal_strength: 1.0,
            noise_std: 0.05,
            imbalance_ratio: 1.0,
            seed,
        }
    }

    /// Four classes, six layers of width 16, signal only at `(layer, kind)`.
    pub fn planted(layer: usize, kind: TokenKind, seed: u64) -> Self {
        SynthSpec {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            planted_layer: Some(layer),
            planted_kind: Some(kind),
            signal_strength: 1.0,
            noise_std: 0.1,
            ..Self::separable(seed)
        }
    }

    pub fn dim(&self, layer: usize) -> usize {
        if self.dims.len() == 1 {
            self.dims[0]
        } else {
            self.dims[layer - 1]
        }
    }

    fn patch_layers(&self) -> Vec<usize> {
        if !self.tokens.patch {
            vec![]
        } else if self.patch_layers.is_empty() {
            (1..=self.num_layers).collect()
        } else {
            let mut v = self.patch_layers.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    }

    fn class_counts(&self, n: usize) -> Result<Vec<usize>> {
        let k = self.num_classes;
        let mut counts: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        if self.imbalance_ratio > 1.0 {
            let head = counts[0] as f64;
            for (c, count) in counts.iter_mut().enumerate() {
                let keep = (head / self.imbalance_ratio.powf(c as f64 / (k - 1) as f64)).round() as usize;
                *count = keep.min(*count);
            }
            if counts.contains(&0) {
                return Err(Error::Config(format!(
                    "imbalance_ratio {} leaves a class empty with {n} samples over {k} classes",
                    self.imbalance_ratio
                )));
            }
        }
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.dims.is_empty() || (self.dims.len() != 1 && self.dims.len() != self.num_layers) {
            return bad(format!(
                "dims must have 1 or num_layers ({}) entries, got {}",
                self.num_layers,
                self.dims.len()
            ));
        }
        if self.dims.contains(&0) {
            return bad("dims entries must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let min_dim = self.dims.iter().copied().min().unwrap_or(0);
        if self.num_classes > min_dim {
            return bad(format!(
                "num_classes {} exceeds the smallest layer width {min_dim}; class means need K <= d",
                self.num_classes
            ));
        }
        if self.tokens.is_empty() {
            return bad("tokens must name at least one token kind".into());
        }
        if self.tokens.patch && self.num_patches == 0 {
            return bad("num_patches must be at least 1 when PATCH tokens are generated".into());
        }
        if let Some(l) = self.patch_layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return bad(format!("patch_layers entry {l} not in [1, {}]", self.num_layers));
        }
        match (self.planted_layer, self.planted_kind) {
            (None, None) => {}
            (Some(l), Some(kind)) => {
                if l == 0 || l > self.num_layers {
                    return bad(format!("planted_layer {l} not in [1, {}]", self.num_layers));
                }
                if !self.tokens.contains(kind) {
                    return bad(format!("planted_kind {kind} is not among the generated tokens"));
                }
                if kind == TokenKind::Patch && !self.patch_layers().contains(&l) {
                    return bad(format!("planted_kind PATCH but layer {l} stores no PATCH tokens"));
                }
            }
            _ => return bad("planted_layer and planted_kind must be set together".into()),
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad(format!("signal_strength must be finite and >= 0, got {}", self.signal_strength));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad(format!("imbalance_ratio must be >= 1, got {}", self.imbalance_ratio));
        }
        for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n < self.num_classes {
                return bad(format!("{name} {n} is smaller than num_classes {}", self.num_classes));
            }
        }
        if self.n_val > 0 && self.n_val < self.num_classes {
            return bad(format!("n_val {} is smaller than num_classes {}", self.n_val, self.num_classes));
        }
        for n in [self.n_train, self.n_val, self.n_test] {
            if n > 0 {
                self.class_counts(n)?;
            }
        }
        Ok(())
    }
}

fn slot_values(spec: &SynthSpec, split: &str, kind: TokenKind, layer: usize, labels: &[u32], signal: bool) -> Vec<f32> {
    let d = spec.dim(layer);
    let per = if kind == TokenKind::Patch { spec.num_patches } else { 1 };
    let mut rng = RngStream::new(spec.seed, &format!("synth/{split}/{kind}/{layer}"));
    let mut out = Vec::with_capacity(labels.len() * per * d);
    let mut v = vec![0.0f64; d];
    for &y in labels {
        for _ in 0..per {
            for x in v.iter_mut() {
                *x = spec.noise_std * rng.normal();
            }
            if signal {
                v[y as usize] += spec.signal_strength;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if norm > 1e-12 { 1.0 / norm } else { 1.0 };
            out.extend(v.iter().map(|x| (x * scale) as f32));
        }
    }
    out
}

fn build(spec: &SynthSpec, model_id: &str, carries_signal: impl Fn(TokenKind, usize) -> bool) -> Result<FeatureStore> {
    spec.validate()?;
    let kinds = spec.tokens.kinds();
    let patch_layers = spec.patch_layers();
    let mut splits = BTreeMap::new();
    for (name, n) in [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)] {
        if n == 0 {
            continue;
        }
        let counts = spec.class_counts(n)?;
        let mut labels: Vec<u32> = Vec::new();
        let max = counts.iter().copied().max().unwrap_or(0);
        for i in 0..max {
            for (c, &cnt) in counts.iter().enumerate() {
                if i < cnt {
                    labels.push(c as u32);
                }
            }
        }
        let mut data = SplitData {
            labels,
            ..Default::default()
        };
        for &kind in &kinds {
            for layer in 1..=spec.num_layers {
                if kind == TokenKind::Patch && !patch_layers.contains(&layer) {
                    continue;
                }
                let values = slot_values(spec, name, kind, layer, &data.labels, carries_signal(kind, layer));
                data.tensors.insert((kind, layer), values);
            }
        }
        splits.insert(name.to_string(), data);
    }
    let meta = StoreMeta {
        format_version: FORMAT_VERSION,
        model_id: model_id.to_string(),
        num_layers: spec.num_layers,
        hidden_dims: (1..=spec.num_layers).map(|l| spec.dim(l)).collect(),
        num_patches: if spec.tokens.patch { spec.num_patches } else { 0 },
        token_kinds: kinds,
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
        splits: splits.iter().map(|(k, v): (&String, &SplitData)| (k.clone(), v.len())).collect(),
        extraction_point: DEFAULT_EXTRACTION_POINT.to_string(),
    };
    let store = FeatureStore { meta, splits };
    store.validate()?;
    Ok(store)
}

/// Class signal in every slot.
pub fn generate_separable(spec: &SynthSpec) -> Result<FeatureStore> {
    build(spec, "synth-separable", |_, _| true)
}

/// Class signal only in the planted (layer, kind) slot.
pub fn generate_planted(spec: &SynthSpec) -> Result<FeatureStore> {
    let (Some(layer), Some(kind)) = (spec.planted_layer, spec.planted_kind) else {
        return Err(Error::Config("planted stores need planted_layer and planted_kind".into()));
    };
    build(spec, "synth-planted", move |k, l| k == kind && l == layer)
}

/// Separable store whose layers have different widths.
pub fn generate_mixed_width(spec: &SynthSpec) -> Result<FeatureStore> {
    if spec.dims.len() != spec.num_layers {
        return Err(Error::Config(format!(
            "dims must list one width per layer ({}), got {}",
            spec.num_layers,
            spec.dims.len()
        )));
    }
    build(spec, "synth-mixed-width", |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::planted(3, TokenKind::Ap, 7);
        assert_eq!(generate_planted(&spec).unwrap(), generate_planted(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_planted(&spec).unwrap(), generate_planted(&other).unwrap());
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::separable(1)
        };
        let store = generate_separable(&spec).unwrap();
        let train = store.split("train").unwrap();
        for i in 0..train.len() {
            let v = store.token(train, TokenKind::Cls, 2, i, 0);
            let y = train.labels[i] as usize;
            for (j, x) in v.iter().enumerate() {
                assert_eq!(*x, if j == y { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn imbalance_by_truncation() {
        let spec = SynthSpec {
            imbalance_ratio: 4.0,
            ..SynthSpec::separable(2)
        };
        let store = generate_separable(&spec).unwrap();
        let labels = &store.split("train").unwrap().labels;
        let count = |c| labels.iter().filter(|&&y| y == c).count();
        assert_eq!(count(0), 100);
        assert_eq!(count(3), 25);
        assert!(count(1) > count(2));
        let impossible = SynthSpec {
            imbalance_ratio: 1000.0,
            ..SynthSpec::separable(2)
        };
        assert!(generate_separable(&impossible).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let spec = SynthSpec::planted(9, TokenKind::Ap, 0);
        let err = generate_planted(&spec).unwrap_err().to_string();
        assert!(err.contains("planted_layer"), "{err}");
        let spec = SynthSpec {
            num_classes: 20,
            ..SynthSpec::separable(0)
        };
        assert!(generate_separable(&spec).unwrap_err().to_string().contains("num_classes"));
    }

    #[test]
    fn mixed_width_and_patch_layers() {
        let spec = SynthSpec {
            num_layers: 2,
            dims: vec![8, 16],
            tokens: TokenSet::CLS_PATCH,
            num_patches: 3,
            patch_layers: vec![2],
            ..SynthSpec::separable(3)
        };
        let store = generate_mixed_width(&spec).unwrap();
        assert_eq!(store.meta.hidden_dims, vec![8, 16]);
        assert!(store.has_tensor("train", TokenKind::Patch, 2));
        assert!(!store.has_tensor("train", TokenKind::Patch, 1));
        let bad = SynthSpec { dims: vec![8], ..spec };
        assert!(generate_mixed_width(&bad).is_err());
    }

    #[test]
    fn tokens_are_unit_norm() {
        let store = generate_planted(&SynthSpec::planted(2, TokenKind::Cls, 4)).unwrap();
        for split in store.splits.values() {
            for (&(_, layer), data) in &split.tensors {
                for v in data.chunks(store.meta.dim(layer)) {
                    let n: f64 = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
