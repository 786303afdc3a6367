//! Probe architectures over stacked frozen features.
//!
//! Four kinds are supported:
//!
//! * `LinearCls`: linear classifier on the last-layer `CLS` token (baseline).
//! * `LinearConcat`: linear classifier on the concatenated stacked rows.
//! * `AttentiveFusion`: multi-head cross-attention with one learned query
//!   over per-layer summary tokens, then an output map, an affine
//!   standardization and a linear classifier.
//! * `AttentiveTokens`: the same attentive head over all tokens of one or more
//!   layers (last-layer `AAT`, or the quarterly-layer hybrid).

mod attentive;
mod checkpoint;
mod linear;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Param, Tensor};
use crate::error::{Error, Result};
use crate::reprstore::{
    resolve_layers, row_layout, rows_width, FeatureStore, LayerScheme, RowTag, StoreMeta, TokenKind,
    TokenSet,
};
use crate::rng::RngStream;

pub use attentive::{AttentiveCache, AttentiveProbe};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use linear::LinearProbe;

/// Standard deviation of the normal initialization of weights and query.
pub const INIT_STD: f64 = 0.02;
/// Head count used by all-token attentive probes.
pub const AAT_HEADS: usize = 8;
pub const AAT_WEIGHT_DECAY: f64 = 0.1;
pub const HYBRID_HEADS: usize = 24;
pub const HYBRID_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeKind {
    LinearCls,
    LinearConcat,
    AttentiveFusion,
    AttentiveTokens,
}

impl ProbeKind {
    pub fn is_attentive(self) -> bool {
        matches!(self, ProbeKind::AttentiveFusion | ProbeKind::AttentiveTokens)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::LinearCls => "linear-cls",
            ProbeKind::LinearConcat => "linear-concat",
            ProbeKind::AttentiveFusion => "attentive-fusion",
            ProbeKind::AttentiveTokens => "attentive-tokens",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear-cls" | "linear_cls" => Ok(ProbeKind::LinearCls),
            "linear" | "linear-concat" | "linear_concat" => Ok(ProbeKind::LinearConcat),
            "attentive-fusion" | "attentive_fusion" | "attentive" => Ok(ProbeKind::AttentiveFusion),
            "attentive-tokens" | "attentive_tokens" | "aat" | "hybrid" => Ok(ProbeKind::AttentiveTokens),
            other => Err(Error::Config(format!("unknown probe kind '{other}'"))),
        }
    }
}

/// Requested number of attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum HeadCount {
    /// One head per fused representation (falls back to the largest divisor
    /// of `2d` not exceeding `R`).
    Auto,
    Fixed(usize),
}

impl fmt::Display for HeadCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadCount::Auto => f.write_str("auto"),
            HeadCount::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for HeadCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(HeadCount::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(HeadCount::Fixed(n)),
            _ => Err(Error::Config(format!("head count must be 'auto' or a positive integer, got '{s}'"))),
        }
    }
}

impl From<HeadCount> for String {
    fn from(h: HeadCount) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HeadCount {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Declarative probe description, independent of any store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub layers: LayerScheme,
    pub tokens: TokenSet,
    pub heads: HeadCount,
    pub attn_dropout: f64,
    /// Weight decay fixed for this probe during hyperparameter search.
    #[serde(default)]
    pub pinned_weight_decay: Option<f64>,
    /// Attention dropout fixed for this probe during hyperparameter search.
    #[serde(default)]
    pub pinned_dropout: Option<f64>,
}

impl ProbeConfig {
    fn base(kind: ProbeKind, layers: LayerScheme, tokens: TokenSet, heads: HeadCount) -> Self {
        ProbeConfig {
            kind,
            layers,
            tokens,
            heads,
            attn_dropout: 0.0,
            pinned_weight_decay: None,
            pinned_dropout: None,
        }
    }

    /// Last-layer `CLS` linear baseline.
    pub fn linear_cls() -> Self {
        Self::base(ProbeKind::LinearCls, LayerScheme::Last, TokenSet::CLS, HeadCount::Auto)
    }

    pub fn linear_concat(layers: LayerScheme, tokens: TokenSet) -> Self {
        Self::base(ProbeKind::LinearConcat, layers, tokens, HeadCount::Auto)
    }

    pub fn attentive_fusion(layers: LayerScheme, tokens: TokenSet, heads: HeadCount) -> Self {
        Self::base(ProbeKind::AttentiveFusion, layers, tokens, heads)
    }

    /// Attention over all last-layer patch tokens plus the last `CLS`.
    pub fn aat() -> Self {
        let mut cfg = Self::base(
            ProbeKind::AttentiveTokens,
            LayerScheme::Last,
            TokenSet::CLS_PATCH,
            HeadCount::Fixed(AAT_HEADS),
        );
        cfg.pinned_weight_decay = Some(AAT_WEIGHT_DECAY);
        cfg
    }

    /// Attention over all tokens of the quarterly layers (which include the
    /// last layer), with 24 heads and attention dropout 0.5.
    pub fn hybrid() -> Self {
        let mut cfg = Self::base(
            ProbeKind::AttentiveTokens,
            LayerScheme::Quarterly,
            TokenSet::CLS_PATCH,
            HeadCount::Fixed(HYBRID_HEADS),
        );
        cfg.attn_dropout = HYBRID_DROPOUT;
        cfg.pinned_dropout = Some(HYBRID_DROPOUT);
        cfg.pinned_weight_decay = Some(AAT_WEIGHT_DECAY);
        cfg
    }

    /// Taxonomy label `[layers] ([tokens], [fusion])`.
    pub fn label(&self) -> String {
        let fusion = match self.kind {
            ProbeKind::LinearCls | ProbeKind::LinearConcat => "linear",
            ProbeKind::AttentiveFusion | ProbeKind::AttentiveTokens => "attentive",
        };
        format!("{} ({}, {})", self.layers, self.tokens, fusion)
    }
}

/// A configuration resolved against a store: concrete rows, width, heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayout {
    pub config: ProbeConfig,
    pub num_layers: usize,
    pub layers: Vec<usize>,
    pub rows: Vec<RowTag>,
    pub d_model: usize,
    /// 0 for linear probes.
    pub num_heads: usize,
    /// Set when `Auto` could not use one head per row.
    #[serde(default)]
    pub head_fallback: bool,
    pub num_classes: usize,
}

impl ProbeLayout {
    pub fn resolve(config: &ProbeConfig, meta: &StoreMeta) -> Result<Self> {
        let mut config = config.clone();
        if config.kind == ProbeKind::LinearCls {
            config.layers = LayerScheme::Last;
            config.tokens = TokenSet::CLS;
        }
        match config.kind {
            ProbeKind::AttentiveTokens if !config.tokens.patch => {
                return Err(Error::Config(
                    "all-token attentive probes need PATCH tokens in the token set".into(),
                ))
            }
            ProbeKind::AttentiveTokens if !meta.has_kind(TokenKind::Patch) => {
                return Err(Error::Config(format!(
                    "store '{}' has no PATCH tokens; all-token attentive probes need them",
                    meta.model_id
                )))
            }
            ProbeKind::LinearConcat | ProbeKind::AttentiveFusion if config.tokens.patch => {
                return Err(Error::Config(format!(
                    "{} fuses summary tokens only; use attentive-tokens for PATCH",
                    config.kind
                )))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&config.attn_dropout) {
            return Err(Error::Config(format!(
                "attention dropout {} not in [0, 1)",
                config.attn_dropout
            )));
        }
        let layers = resolve_layers(meta.num_layers, &config.layers)?;
        let rows = row_layout(meta, &layers, config.tokens)?;
        let d_model = rows_width(meta, &rows);
        let (num_heads, head_fallback) = if config.kind.is_attentive() {
            resolve_heads(config.heads, rows.len(), d_model)?
        } else {
            (0, false)
        };
        Ok(ProbeLayout {
            config,
            num_layers: meta.num_layers,
            layers,
            rows,
            d_model,
            num_heads,
            head_fallback,
            num_classes: meta.num_classes,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Per-head width `2d / M`.
    pub fn head_dim(&self) -> usize {
        if self.num_heads == 0 {
            0
        } else {
            2 * self.d_model / self.num_heads
        }
    }

    /// Attention score entries computed per sample (`M · R`).
    pub fn score_entries(&self) -> usize {
        self.num_heads * self.rows.len()
    }

    /// Every row's tensor must exist in `split` of `store`.
    pub fn check_store(&self, store: &FeatureStore, split: &str) -> Result<()> {
        for r in &self.rows {
            if !store.has_tensor(split, r.kind, r.layer) {
                return Err(Error::Config(format!(
                    "store '{}' split '{}' lacks {} tokens for layer {}",
                    store.meta.model_id, split, r.kind, r.layer
                )));
            }
        }
        Ok(())
    }

    /// Parameter budget of this layout. Linear probes size by their actual
    /// row count, which equals `2·|𝓛|` for `CLS+AP` stacks.
    pub fn param_count(&self) -> usize {
        match self.config.kind {
            ProbeKind::LinearCls | ProbeKind::LinearConcat => {
                self.rows.len() * self.d_model * self.num_classes + self.num_classes
            }
            kind => count_params(kind, self.d_model, self.layers.len(), self.num_classes),
        }
    }
}

fn resolve_heads(heads: HeadCount, rows: usize, d_model: usize) -> Result<(usize, bool)> {
    let width = 2 * d_model;
    match heads {
        HeadCount::Fixed(m) => {
            if m == 0 || !width.is_multiple_of(m) {
                return Err(Error::Config(format!(
                    "2d = {width} is not divisible by {m} heads"
                )));
            }
            Ok((m, false))
        }
        HeadCount::Auto => {
            if rows > 0 && width.is_multiple_of(rows) {
                return Ok((rows, false));
            }
            let m = (1..=rows.min(width)).rev().find(|m| width.is_multiple_of(*m)).unwrap_or(1);
            Ok((m, true))
        }
    }
}

/// Closed-form parameter budgets.
///
/// * linear concatenation: `2·|𝓛|·d·K + K`
/// * attentive (fusion or all-token): `8d² + 10d + d·K + K`
/// * last-layer `CLS` linear: `d·K + K`
pub fn count_params(kind: ProbeKind, d: usize, num_layers: usize, k: usize) -> usize {
    match kind {
        ProbeKind::LinearConcat => 2 * num_layers * d * k + k,
        ProbeKind::AttentiveFusion | ProbeKind::AttentiveTokens => 8 * d * d + 10 * d + d * k + k,
        ProbeKind::LinearCls => d * k + k,
    }
}

/// All-token attentive probe over the last layer: `P + 1` rows, 8 heads.
pub fn make_aat_config(meta: &StoreMeta) -> Result<ProbeLayout> {
    ProbeLayout::resolve(&ProbeConfig::aat(), meta)
}

/// Hybrid all-token probe over the quarterly layers, 24 heads, dropout 0.5.
pub fn make_hybrid_config(meta: &StoreMeta) -> Result<ProbeLayout> {
    ProbeLayout::resolve(&ProbeConfig::hybrid(), meta)
}

/// Forward results. `attn` is `[B × M × R]` pre-dropout softmax weights for
/// attentive probes.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub attn: Option<Tensor>,
    pub cache: ForwardCache,
    /// Attention score entries computed for the whole batch.
    pub score_entries: usize,
}

#[derive(Clone, Debug)]
pub enum ForwardCache {
    Linear { x: Tensor },
    Attentive(Box<AttentiveCache>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Attentive(AttentiveProbe),
}

/// Fresh probe with `N(0, 0.02²)` weights and query, zero biases, unit gain.
pub fn init_probe(layout: &ProbeLayout, rng: &mut RngStream) -> Result<Probe> {
    match layout.config.kind {
        ProbeKind::LinearCls | ProbeKind::LinearConcat => Ok(Probe::Linear(LinearProbe::init(layout, rng)?)),
        ProbeKind::AttentiveFusion | ProbeKind::AttentiveTokens => {
            Ok(Probe::Attentive(AttentiveProbe::init(layout, rng)?))
        }
    }
}

impl Probe {
    pub fn layout(&self) -> &ProbeLayout {
        match self {
            Probe::Linear(p) => &p.layout,
            Probe::Attentive(p) => &p.layout,
        }
    }

    pub fn params(&self) -> &[Param] {
        match self {
            Probe::Linear(p) => &p.params,
            Probe::Attentive(p) => &p.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<Param> {
        match self {
            Probe::Linear(p) => &mut p.params,
            Probe::Attentive(p) => &mut p.params,
        }
    }

    /// Parameter count by enumerating the materialized arrays.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Attention dropout used in training-mode forward passes.
    pub fn set_attn_dropout(&mut self, p: f64) {
        if let Probe::Attentive(a) = self {
            a.layout.config.attn_dropout = p;
        }
    }

    /// `h` is `[B × R × d]`. Dropout is active only with `train` and a stream.
    pub fn forward(&self, h: &Tensor, train: bool, rng: Option<&mut RngStream>) -> Result<ForwardOutput> {
        match self {
            Probe::Linear(p) => p.forward(h),
            Probe::Attentive(p) => p.forward(h, train, rng),
        }
    }

    /// Gradients for every parameter, in [`Probe::params`] order.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        match (self, cache) {
            (Probe::Linear(p), ForwardCache::Linear { x }) => p.backward(x, dlogits),
            (Probe::Attentive(p), ForwardCache::Attentive(c)) => p.backward(c, dlogits),
            _ => Err(Error::Shape("forward cache does not belong to this probe".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    pub(crate) fn meta(l: usize, d: usize, p: usize, k: usize) -> StoreMeta {
        let mut kinds = vec![TokenKind::Cls, TokenKind::Ap];
        if p > 0 {
            kinds.push(TokenKind::Patch);
        }
        StoreMeta {
            format_version: 1,
            model_id: "meta".into(),
            num_layers: l,
            hidden_dims: vec![d; l],
            num_patches: p,
            token_kinds: kinds,
            num_classes: k,
            class_names: vec![],
            splits: BTreeMap::new(),
            extraction_point: String::new(),
        }
    }

    #[test]
    fn table_cells() {
        assert_eq!(count_params(ProbeKind::LinearConcat, 384, 12, 2), 18_434);
        assert_eq!(count_params(ProbeKind::AttentiveFusion, 384, 12, 2), 1_184_258);
        assert_eq!(count_params(ProbeKind::AttentiveFusion, 1024, 24, 200), 8_603_848);
        assert_eq!(count_params(ProbeKind::LinearConcat, 1024, 24, 200), 9_830_600);
        assert_eq!(count_params(ProbeKind::AttentiveFusion, 768, 12, 10), 4_733_962);
        assert_eq!(count_params(ProbeKind::LinearCls, 768, 12, 10), 7_690);
    }

    #[test]
    fn auto_heads_match_rows() {
        let m = meta(12, 768, 0, 10);
        let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
        let lay = ProbeLayout::resolve(&cfg, &m).unwrap();
        assert_eq!((lay.num_rows(), lay.num_heads, lay.head_fallback), (24, 24, false));
        assert_eq!(lay.head_dim(), 64);

        let m = meta(6, 16, 0, 4);
        let lay = ProbeLayout::resolve(&cfg, &m).unwrap();
        // 2d = 32 is not divisible by R = 12; largest divisor ≤ 12 is 8
        assert_eq!((lay.num_heads, lay.head_fallback), (8, true));
    }

    #[test]
    fn fixed_heads_must_divide() {
        let m = meta(2, 8, 0, 2);
        let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Fixed(4));
        assert_eq!(ProbeLayout::resolve(&cfg, &m).unwrap().head_dim(), 4);
        let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Fixed(3));
        assert!(ProbeLayout::resolve(&cfg, &m).is_err());
    }

    #[test]
    fn aat_and_hybrid_layouts() {
        let lay = make_aat_config(&meta(12, 8, 16, 3)).unwrap();
        assert_eq!(lay.num_rows(), 17);
        assert_eq!(lay.score_entries(), 136);
        assert_eq!(lay.config.pinned_weight_decay, Some(0.1));

        assert_eq!(make_hybrid_config(&meta(12, 768, 196, 10)).unwrap().num_rows(), 788);
        let dino = make_hybrid_config(&meta(12, 768, 256, 10)).unwrap();
        assert_eq!(dino.num_rows(), 1028);
        assert_eq!(dino.config.attn_dropout, 0.5);
        assert_eq!(dino.num_heads, 24);

        assert!(make_aat_config(&meta(12, 8, 0, 3)).is_err());
    }

    #[test]
    fn fusion_vs_aat_score_counts() {
        let m = meta(12, 768, 196, 10);
        let fusion = ProbeLayout::resolve(
            &ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto),
            &m,
        )
        .unwrap();
        assert_eq!(fusion.score_entries(), 24 * 24);
        assert_eq!(make_aat_config(&m).unwrap().score_entries(), 8 * 197);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("aat".parse::<ProbeKind>().unwrap(), ProbeKind::AttentiveTokens);
        assert_eq!("linear".parse::<ProbeKind>().unwrap(), ProbeKind::LinearConcat);
        assert!("mlp".parse::<ProbeKind>().is_err());
        assert_eq!("auto".parse::<HeadCount>().unwrap(), HeadCount::Auto);
        assert!("0".parse::<HeadCount>().is_err());
    }

    #[test]
    fn taxonomy_label() {
        let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
        assert_eq!(cfg.label(), "all (cls+ap, attentive)");
        assert_eq!(ProbeConfig::linear_cls().label(), "last (cls, linear)");
    }
}
