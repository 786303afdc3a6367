use serde::{Deserialize, Serialize};

use super::{evaluate, train, DataView, SplitSpec, TrainPlan};
use crate::error::{Error, Result};
use crate::par;
use crate::probes::ProbeLayout;
use crate::reprstore::FeatureStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test_bal_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub runs: Vec<SeedRun>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl SeedStudy {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.test_bal_acc).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.test_bal_acc - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        SeedStudy {
            runs,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Trains the same plan under each seed and scores every run on `test`.
pub fn seed_study(
    layout: &ProbeLayout,
    plan: &TrainPlan,
    store: &FeatureStore,
    spec: &SplitSpec,
    test: &DataView,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SeedStudy> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("seed study needs at least 2 seeds, got {}", seeds.len())));
    }
    let runs = par::with_workers(workers, || {
        par::map(seeds, |&seed| -> Result<SeedRun> {
            let plan = TrainPlan { seed, ..plan.clone() };
            let (probe, _) = train(layout, &plan, store, spec)?;
            let acc = evaluate(&probe, store, test, false)?.balanced_accuracy(layout.num_classes)?;
            Ok(SeedRun { seed, test_bal_acc: acc })
        })
    });
    Ok(SeedStudy::from_runs(runs.into_iter().collect::<Result<Vec<_>>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = SeedStudy::from_runs(vec![
            SeedRun { seed: 1, test_bal_acc: 0.5 },
            SeedRun { seed: 1, test_bal_acc: 0.5 },
        ]);
        assert_eq!(s.std, 0.0);
        let s = SeedStudy::from_runs(vec![
            SeedRun { seed: 1, test_bal_acc: 0.2 },
            SeedRun { seed: 2, test_bal_acc: 0.4 },
            SeedRun { seed: 3, test_bal_acc: 0.6 },
        ]);
        assert!((s.mean - 0.4).abs() < 1e-12);
        assert!((s.std - 0.2).abs() < 1e-12);
    }
}
