use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::reprstore::{RowTag, TokenKind};

use super::report::fmt17;

/// Attention mass per (token kind, layer), averaged over samples and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub kinds: Vec<TokenKind>,
    pub layers: Vec<usize>,
    /// `values[k][l]` for `kinds[k]` at `layers[l]`.
    pub values: Vec<Vec<f64>>,
    pub samples: usize,
    pub heads: usize,
}

impl HeatmapMatrix {
    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }

    pub fn get(&self, kind: TokenKind, layer: usize) -> f64 {
        match (
            self.kinds.iter().position(|&k| k == kind),
            self.layers.iter().position(|&l| l == layer),
        ) {
            (Some(k), Some(l)) => self.values[k][l],
            _ => 0.0,
        }
    }

    /// Cell with the most mass; the first one wins ties.
    pub fn argmax(&self) -> (TokenKind, usize) {
        let mut best = (self.kinds[0], self.layers[0], f64::NEG_INFINITY);
        for (k, row) in self.values.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (self.kinds[k], self.layers[l], v);
                }
            }
        }
        (best.0, best.1)
    }

    /// One row per token kind, one column per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind");
        for l in &self.layers {
            out.push_str(&format!(",L{l}"));
        }
        out.push('\n');
        for (k, row) in self.values.iter().enumerate() {
            out.push_str(self.kinds[k].as_str());
            for v in row {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Running sums of attention mass per stacked row. Merging is commutative
/// and associative, so batches can be reduced in any grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAccumulator {
    rows: Vec<RowTag>,
    num_layers: usize,
    sums: Vec<f64>,
    samples: usize,
    heads: usize,
}

impl AttentionAccumulator {
    pub fn new(rows: &[RowTag], num_layers: usize) -> Self {
        AttentionAccumulator {
            rows: rows.to_vec(),
            num_layers,
            sums: vec![0.0; rows.len()],
            samples: 0,
            heads: 0,
        }
    }

    /// Adds a `[B × M × R]` block of attention weights.
    pub fn add(&mut self, attn: &Tensor) -> Result<()> {
        let (b, m, r) = attn.dims3()?;
        if r != self.rows.len() {
            return Err(Error::Shape(format!(
                "attention has {r} rows but {} row tags were given",
                self.rows.len()
            )));
        }
        if self.samples > 0 && m != self.heads {
            return Err(Error::Shape(format!("attention has {m} heads, expected {}", self.heads)));
        }
        self.heads = m;
        for chunk in attn.data().chunks(r) {
            for (s, v) in self.sums.iter_mut().zip(chunk) {
                *s += v;
            }
        }
        self.samples += b;
        Ok(())
    }

    pub fn merge(&mut self, other: &AttentionAccumulator) -> Result<()> {
        if other.rows != self.rows {
            return Err(Error::Shape("cannot merge attention over different rows".into()));
        }
        if other.samples == 0 {
            return Ok(());
        }
        if self.samples > 0 && other.heads != self.heads {
            return Err(Error::Shape("cannot merge attention with different head counts".into()));
        }
        self.heads = other.heads;
        for (s, v) in self.sums.iter_mut().zip(&other.sums) {
            *s += v;
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Folds rows into (kind, layer) cells; patches of a layer are summed.
    pub fn finish(&self) -> Result<HeatmapMatrix> {
        if self.samples == 0 {
            return Err(Error::Data("no attention weights were accumulated".into()));
        }
        let mut kinds: Vec<TokenKind> = self.rows.iter().map(|r| r.kind).collect();
        kinds.sort();
        kinds.dedup();
        let layers: Vec<usize> = (1..=self.num_layers).collect();
        let mut values = vec![vec![0.0; layers.len()]; kinds.len()];
        let norm = (self.samples * self.heads) as f64;
        for (tag, s) in self.rows.iter().zip(&self.sums) {
            let k = kinds.iter().position(|&x| x == tag.kind).unwrap_or(0);
            if tag.layer == 0 || tag.layer > self.num_layers {
                return Err(Error::Shape(format!("row tag {tag} outside 1..={}", self.num_layers)));
            }
            values[k][tag.layer - 1] += s / norm;
        }
        Ok(HeatmapMatrix {
            kinds,
            layers,
            values,
            samples: self.samples,
            heads: self.heads,
        })
    }
}

/// Averages a stream of `[B × M × R]` eval-mode attention blocks.
pub fn aggregate_attention<'a, I>(batches: I, rows: &[RowTag], num_layers: usize) -> Result<HeatmapMatrix>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut acc = AttentionAccumulator::new(rows, num_layers);
    for b in batches {
        acc.add(b)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(layer: usize, kind: TokenKind) -> RowTag {
        RowTag { layer, kind, patch: None }
    }

    #[test]
    fn single_row_is_one() {
        let attn = Tensor::full(&[3, 2, 1], 1.0);
        let h = aggregate_attention([&attn], &[tag(1, TokenKind::Cls)], 1).unwrap();
        assert_eq!(h.values, vec![vec![1.0]]);
    }

    #[test]
    fn uniform_attention_spreads_evenly() {
        let rows = [
            tag(1, TokenKind::Cls),
            tag(2, TokenKind::Cls),
            tag(1, TokenKind::Ap),
            tag(2, TokenKind::Ap),
        ];
        let attn = Tensor::full(&[5, 4, 4], 0.25);
        let h = aggregate_attention([&attn, &attn], &rows, 2).unwrap();
        for row in &h.values {
            for v in row {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        assert_eq!(h.samples, 10);
    }

    #[test]
    fn patches_sum_and_unused_cells_are_zero() {
        let rows = [
            tag(3, TokenKind::Cls),
            RowTag { layer: 3, kind: TokenKind::Patch, patch: Some(0) },
            RowTag { layer: 3, kind: TokenKind::Patch, patch: Some(1) },
        ];
        let attn = Tensor::from_vec(&[2, 1, 3], vec![0.2, 0.3, 0.5, 0.4, 0.4, 0.2]).unwrap();
        let h = aggregate_attention([&attn], &rows, 3).unwrap();
        assert!((h.get(TokenKind::Cls, 3) - 0.3).abs() < 1e-12);
        assert!((h.get(TokenKind::Patch, 3) - 0.7).abs() < 1e-12);
        assert_eq!(h.get(TokenKind::Cls, 1), 0.0);
        assert!((h.total() - 1.0).abs() < 1e-12);
        assert_eq!(h.argmax(), (TokenKind::Patch, 3));
    }

    #[test]
    fn shape_mismatch_errors() {
        let attn = Tensor::full(&[1, 1, 2], 0.5);
        assert!(aggregate_attention([&attn], &[tag(1, TokenKind::Cls)], 1).is_err());
    }

    #[test]
    fn merge_matches_single_pass() {
        let rows = [tag(1, TokenKind::Cls), tag(1, TokenKind::Ap)];
        let a = Tensor::from_vec(&[1, 1, 2], vec![0.9, 0.1]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let mut x = AttentionAccumulator::new(&rows, 1);
        x.add(&a).unwrap();
        let mut y = AttentionAccumulator::new(&rows, 1);
        y.add(&b).unwrap();
        let mut merged = AttentionAccumulator::new(&rows, 1);
        merged.merge(&y).unwrap();
        merged.merge(&x).unwrap();
        let direct = aggregate_attention([&a, &b], &rows, 1).unwrap();
        let m = merged.finish().unwrap();
        for (p, q) in m.values.iter().flatten().zip(direct.values.iter().flatten()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_layout() {
        let rows = [tag(1, TokenKind::Cls), tag(2, TokenKind::Ap)];
        let attn = Tensor::from_vec(&[1, 1, 2], vec![0.5, 0.5]).unwrap();
        let csv = aggregate_attention([&attn], &rows, 2).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,L1,L2");
        assert!(lines[1].starts_with("CLS,"));
        assert!(lines[2].starts_with("AP,"));
    }
}
