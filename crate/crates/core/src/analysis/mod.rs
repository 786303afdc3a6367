//! Metrics, attention heatmaps, CKA similarity and run reports.

mod cka;
mod heatmap;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cka::{cka_rbf, layer_similarity_curve, Bandwidth, CKA_MAX_ROWS};
pub use heatmap::{aggregate_attention, AttentionAccumulator, HeatmapMatrix};
pub use report::{
    emit_report, fmt17, to_json_string, write_json, HistorySummary, Provenance, ReportFiles, RunReport,
};

/// Mean per-class recall. Every class in `0..k` must occur in `labels`.
pub fn balanced_accuracy(preds: &[u32], labels: &[u32], k: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        let y = y as usize;
        if y >= k {
            return Err(Error::Data(format!("label {y} outside 0..{k}")));
        }
        counts[y] += 1;
        if p as usize == y {
            hits[y] += 1;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {c} has no samples; balanced accuracy is undefined"
        )));
    }
    let recall: f64 = hits.iter().zip(&counts).map(|(&h, &n)| h as f64 / n as f64).sum();
    Ok(recall / k as f64)
}

/// Gain of `method` over `baseline` in percentage points.
pub fn accuracy_gain(method_acc: f64, baseline_acc: f64) -> f64 {
    100.0 * (method_acc - baseline_acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub method: String,
    pub method_bal_acc: f64,
    pub baseline_bal_acc: f64,
    pub gain_pp: f64,
}

impl GainRecord {
    pub fn new(method: impl Into<String>, method_bal_acc: f64, baseline_bal_acc: f64) -> Self {
        GainRecord {
            method: method.into(),
            method_bal_acc,
            baseline_bal_acc,
            gain_pp: accuracy_gain(method_bal_acc, baseline_bal_acc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let labels: Vec<u32> = (0..100).map(|i| u32::from(i >= 90)).collect();
        assert_eq!(balanced_accuracy(&[0; 100], &labels, 2).unwrap(), 0.5);
        assert!(balanced_accuracy(&[0, 0], &[0, 0], 2).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn gains() {
        assert_eq!(accuracy_gain(0.7, 0.7), 0.0);
        assert!((accuracy_gain(0.85, 0.80) - 5.0).abs() < 1e-9);
        let g = GainRecord::new("fusion", 0.9, 0.6);
        assert!((g.gain_pp - 30.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn balanced_equals_plain_when_balanced(k in 2usize..5, per in 1usize..20, seed in any::<u64>()) {
            let labels: Vec<u32> = (0..k * per).map(|i| (i % k) as u32).collect();
            let mut rng = crate::rng::RngStream::new(seed, "preds");
            let preds: Vec<u32> = labels.iter().map(|_| rng.below(k) as u32).collect();
            let plain = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
            let bal = balanced_accuracy(&preds, &labels, k).unwrap();
            prop_assert!((plain - bal).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_relabeling(seed in any::<u64>(), n in 8usize..60) {
            let k = 4;
            let mut rng = crate::rng::RngStream::new(seed, "labels");
            let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
            rng.shuffle(&mut labels);
            let preds: Vec<u32> = labels.iter().map(|_| rng.below(k) as u32).collect();
            let mut perm: Vec<u32> = (0..k as u32).collect();
            rng.shuffle(&mut perm);
            let pl: Vec<u32> = labels.iter().map(|&y| perm[y as usize]).collect();
            let pp: Vec<u32> = preds.iter().map(|&y| perm[y as usize]).collect();
            let a = balanced_accuracy(&preds, &labels, k).unwrap();
            let b = balanced_accuracy(&pp, &pl, k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn gain_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assert_eq!(accuracy_gain(a, b) + accuracy_gain(b, a), 0.0);
        }
    }
}
