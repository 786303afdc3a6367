//! Feature stores and feature preparation.
//!
//! A [`FeatureStore`] holds, for each split, the labels and one dense `f32`
//! tensor per (token kind, layer): `[N × d_ℓ]` for `CLS`/`AP`, `[N × P × d_ℓ]`
//! for `PATCH`. It is persisted in the `.lfr` container (see [`write_store`]).
//! Preparation turns a store into stacked per-sample row matrices: each token
//! vector is L2-normalized at its native width, then zero-padded to the widest
//! selected layer.

mod format;
mod prep;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_store, write_store, TensorEntry, MAGIC};
pub use prep::{
    assemble_batch, assemble_rows, l2_normalize, pad_to_width, resolve_layers, row_layout,
    rows_width, stratified_split, LayerScheme, RowTag, StackedBatch,
};

pub const FORMAT_VERSION: u32 = 1;

/// Where per-layer features are captured inside each encoder block.
pub const DEFAULT_EXTRACTION_POINT: &str = "after the second layer normalization";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "PATCH")]
    Patch,
}

impl TokenKind {
    pub const ALL: [TokenKind; 3] = [TokenKind::Cls, TokenKind::Ap, TokenKind::Patch];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Cls => "CLS",
            TokenKind::Ap => "AP",
            TokenKind::Patch => "PATCH",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cls" => Ok(TokenKind::Cls),
            "ap" | "avg" | "mean" => Ok(TokenKind::Ap),
            "patch" | "patches" => Ok(TokenKind::Patch),
            other => Err(Error::Config(format!("unknown token kind '{other}'"))),
        }
    }
}

/// A set of token kinds, e.g. `cls+ap`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct TokenSet {
    pub cls: bool,
    pub ap: bool,
    pub patch: bool,
}

impl TokenSet {
    pub const CLS: TokenSet = TokenSet {
        cls: true,
        ap: false,
        patch: false,
    };
    pub const CLS_AP: TokenSet = TokenSet {
        cls: true,
        ap: true,
        patch: false,
    };
    pub const CLS_PATCH: TokenSet = TokenSet {
        cls: true,
        ap: false,
        patch: true,
    };

    pub fn contains(&self, kind: TokenKind) -> bool {
        match kind {
            TokenKind::Cls => self.cls,
            TokenKind::Ap => self.ap,
            TokenKind::Patch => self.patch,
        }
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        TokenKind::ALL
            .into_iter()
            .filter(|k| self.contains(*k))
            .collect()
    }

    /// Number of selected summary kinds (`CLS`, `AP`).
    pub fn summary_count(&self) -> usize {
        usize::from(self.cls) + usize::from(self.ap)
    }

    pub fn is_empty(&self) -> bool {
        !(self.cls || self.ap || self.patch)
    }
}

impl fmt::Display for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .kinds()
            .iter()
            .map(|k| k.as_str().to_ascii_lowercase())
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for TokenSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = TokenSet::default();
        for part in s.split(['+', ',']).filter(|p| !p.trim().is_empty()) {
            match part.parse::<TokenKind>()? {
                TokenKind::Cls => set.cls = true,
                TokenKind::Ap => set.ap = true,
                TokenKind::Patch => set.patch = true,
            }
        }
        if set.is_empty() {
            return Err(Error::Config(format!("empty token set '{s}'")));
        }
        Ok(set)
    }
}

impl From<TokenSet> for String {
    fn from(t: TokenSet) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TokenSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Store-level metadata. Serialized (with the tensor table) as the `.lfr`
/// JSON header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dims: Vec<usize>,
    pub num_patches: usize,
    pub token_kinds: Vec<TokenKind>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Split name → sample count.
    pub splits: BTreeMap<String, usize>,
    #[serde(default)]
    pub extraction_point: String,
}

impl StoreMeta {
    /// Feature width of a 1-based layer.
    pub fn dim(&self, layer: usize) -> usize {
        self.hidden_dims[layer - 1]
    }

    pub fn has_kind(&self, kind: TokenKind) -> bool {
        self.token_kinds.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "version mismatch: store is v{}, reader supports v{}",
                self.format_version, FORMAT_VERSION
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Data("num_layers must be at least 1".into()));
        }
        if self.hidden_dims.len() != self.num_layers {
            return Err(Error::Data(format!(
                "hidden_dims has {} entries for {} layers",
                self.hidden_dims.len(),
                self.num_layers
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Data("every hidden dim must be at least 1".into()));
        }
        if self.has_kind(TokenKind::Patch) && self.num_patches == 0 {
            return Err(Error::Data("PATCH tokens declared with num_patches = 0".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Data("num_classes must be at least 1".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Labels and tensors of one split. Tensor keys are `(kind, 1-based layer)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub labels: Vec<u32>,
    pub tensors: BTreeMap<(TokenKind, usize), Vec<f32>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub meta: StoreMeta,
    pub splits: BTreeMap<String, SplitData>,
}

impl FeatureStore {
    /// Checks every structural invariant: per-layer widths, declared
    /// tensors present with exact lengths, labels within `[0, K)`.
    pub fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        meta.validate()?;
        let declared: Vec<&String> = meta.splits.keys().collect();
        let present: Vec<&String> = self.splits.keys().collect();
        if declared != present {
            return Err(Error::Data(format!(
                "split table {declared:?} does not match split data {present:?}"
            )));
        }
        for (name, split) in &self.splits {
            let n = split.labels.len();
            if meta.splits[name] != n {
                return Err(Error::Data(format!(
                    "split '{}' declares {} samples but has {} labels",
                    name, meta.splits[name], n
                )));
            }
            if let Some((i, y)) = split
                .labels
                .iter()
                .enumerate()
                .find(|(_, &y)| y as usize >= meta.num_classes)
            {
                return Err(Error::Data(format!(
                    "label {} out of range [0, {}) in split '{}' at index {}",
                    y, meta.num_classes, name, i
                )));
            }
            for kind in [TokenKind::Cls, TokenKind::Ap] {
                if meta.has_kind(kind) {
                    for layer in 1..=meta.num_layers {
                        if !split.tensors.contains_key(&(kind, layer)) {
                            return Err(Error::Data(format!(
                                "split '{name}' is missing the {kind} tensor of layer {layer}"
                            )));
                        }
                    }
                }
            }
            if meta.has_kind(TokenKind::Patch)
                && !split.tensors.keys().any(|(k, _)| *k == TokenKind::Patch)
            {
                return Err(Error::Data(format!(
                    "split '{name}' declares PATCH tokens but stores none"
                )));
            }
            for (&(kind, layer), data) in &split.tensors {
                if !meta.has_kind(kind) {
                    return Err(Error::Data(format!(
                        "split '{name}' stores undeclared {kind} tokens"
                    )));
                }
                if layer == 0 || layer > meta.num_layers {
                    return Err(Error::Data(format!(
                        "split '{name}' stores {kind} for layer {layer} outside [1, {}]",
                        meta.num_layers
                    )));
                }
                let want = self.tensor_len(n, kind, layer);
                if data.len() != want {
                    return Err(Error::Data(format!(
                        "split '{}' {}@{}: {} values, expected {}",
                        name,
                        kind,
                        layer,
                        data.len(),
                        want
                    )));
                }
                if data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!(
                        "split '{name}' {kind}@{layer} contains non-finite values"
                    )));
                }
            }
        }
        Ok(())
    }

    fn tensor_len(&self, n: usize, kind: TokenKind, layer: usize) -> usize {
        let d = self.meta.dim(layer);
        match kind {
            TokenKind::Patch => n * self.meta.num_patches * d,
            _ => n * d,
        }
    }

    pub fn split(&self, name: &str) -> Result<&SplitData> {
        self.splits.get(name).ok_or_else(|| {
            Error::Data(format!(
                "store '{}' has no split '{}' (available: {:?})",
                self.meta.model_id,
                name,
                self.splits.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn has_tensor(&self, split: &str, kind: TokenKind, layer: usize) -> bool {
        self.splits
            .get(split)
            .is_some_and(|s| s.tensors.contains_key(&(kind, layer)))
    }

    /// Layers for which `kind` is stored in `split`.
    pub fn layers_with(&self, split: &str, kind: TokenKind) -> Vec<usize> {
        self.splits
            .get(split)
            .map(|s| {
                s.tensors
                    .keys()
                    .filter(|(k, _)| *k == kind)
                    .map(|(_, l)| *l)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Raw stored vector of one token. `patch` selects a patch index for
    /// `PATCH` tensors and is ignored otherwise.
    pub fn token<'a>(&self, split: &'a SplitData, kind: TokenKind, layer: usize, sample: usize, patch: usize) -> &'a [f32] {
        let d = self.meta.dim(layer);
        let data = &split.tensors[&(kind, layer)];
        let start = match kind {
            TokenKind::Patch => (sample * self.meta.num_patches + patch) * d,
            _ => sample * d,
        };
        &data[start..start + d]
    }

    /// Copy with every stored token vector L2-normalized (zero vectors kept).
    pub fn normalized(&self) -> FeatureStore {
        let mut out = self.clone();
        for split in out.splits.values_mut() {
            for (&(_, layer), data) in split.tensors.iter_mut() {
                let d = self.meta.dim(layer);
                for v in data.chunks_mut(d) {
                    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
                    }
                }
            }
        }
        out
    }
}
