use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{train, DataView, Hyper, SplitSpec, TrainHistory, TrainPlan};
use crate::error::{Error, Result};
use crate::par;
use crate::probes::{Probe, ProbeLayout};
use crate::reprstore::{stratified_split, FeatureStore};

pub const VAL_FRACTION: f64 = 0.2;

/// Hyperparameter axes searched for one probe configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            learning_rates: vec![0.1, 0.01, 0.001],
            dropouts: vec![0.0, 0.1, 0.3],
            weight_decays: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0],
        }
    }
}

impl GridSpace {
    /// The default space with the probe's pinned values applied. Linear
    /// probes have no attention, so their dropout axis collapses to 0.
    pub fn for_layout(layout: &ProbeLayout) -> Self {
        let mut space = GridSpace::default();
        let cfg = &layout.config;
        if let Some(wd) = cfg.pinned_weight_decay {
            space.weight_decays = vec![wd];
        }
        if let Some(p) = cfg.pinned_dropout {
            space.dropouts = vec![p];
        } else if !cfg.kind.is_attentive() {
            space.dropouts = vec![0.0];
        }
        space
    }

    /// Cells in lr-major, then dropout, then weight-decay order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.learning_rates {
            for &dropout in &self.dropouts {
                for &wd in &self.weight_decays {
                    out.push(GridCell { lr, wd, dropout });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.dropouts.len() * self.weight_decays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub wd: f64,
    pub dropout: f64,
}

impl GridCell {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            weight_decay: self.wd,
            attn_dropout: self.dropout,
        }
    }
}

/// One leaderboard row. A failed cell has no scores and carries its error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub lr: f64,
    pub wd: f64,
    pub dropout: f64,
    pub val_bal_acc: Option<f64>,
    pub train_bal_acc: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellResult {
    pub fn cell(&self) -> GridCell {
        GridCell {
            lr: self.lr,
            wd: self.wd,
            dropout: self.dropout,
        }
    }
}

/// Ranking: higher validation score first, failed cells last, then lower
/// weight decay, lower learning rate, lower dropout.
pub fn rank_cells(a: &CellResult, b: &CellResult) -> Ordering {
    let score = |c: &CellResult| c.val_bal_acc.filter(|v| v.is_finite());
    let by_score = match (score(a), score(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by_score
        .then(a.wd.total_cmp(&b.wd))
        .then(a.lr.total_cmp(&b.lr))
        .then(a.dropout.total_cmp(&b.dropout))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub cells: Vec<CellResult>,
    /// Index into `cells`.
    pub winner: usize,
}

impl Leaderboard {
    /// Picks the winner among `cells` (kept in grid order).
    pub fn from_cells(cells: Vec<CellResult>) -> Result<Self> {
        let winner = (0..cells.len())
            .min_by(|&i, &j| rank_cells(&cells[i], &cells[j]).then(i.cmp(&j)))
            .ok_or_else(|| Error::Config("empty hyperparameter grid".into()))?;
        if cells[winner].val_bal_acc.is_none() {
            let why = cells[winner].error.clone().unwrap_or_default();
            return Err(Error::Data(format!("every grid cell failed; first error: {why}")));
        }
        Ok(Leaderboard { cells, winner })
    }

    pub fn best(&self) -> &CellResult {
        &self.cells[self.winner]
    }
}

pub struct GridOutcome {
    pub layout: ProbeLayout,
    pub plan: TrainPlan,
    pub probe: Probe,
    pub history: TrainHistory,
    pub split: SplitSpec,
    pub leaderboard: Leaderboard,
}

/// Trains one run per cell on a stratified 80% portion of `train_split`,
/// scores each on the remaining 20% and returns the winning run together
/// with the full leaderboard.
///
/// Cells run in parallel on up to `workers` threads. Only scores are kept
/// while searching; the winner is trained once more afterwards, which gives
/// bitwise the same probe because training is deterministic.
pub fn grid_search(
    layout: &ProbeLayout,
    space: &GridSpace,
    store: &FeatureStore,
    train_split: &str,
    seed: u64,
    workers: Option<usize>,
) -> Result<GridOutcome> {
    let labels = &store.split(train_split)?.labels;
    let (tr, va) = stratified_split(labels, VAL_FRACTION, seed)?;
    let split = SplitSpec {
        train: DataView {
            split: train_split.to_string(),
            indices: tr,
        },
        val: Some(DataView {
            split: train_split.to_string(),
            indices: va,
        }),
    };
    let n_train = split.train.indices.len();
    let cells = space.cells();
    let run = |cell: &GridCell| -> Result<(Probe, TrainHistory, TrainPlan, ProbeLayout)> {
        let plan = TrainPlan::new(n_train, cell.hyper(), seed)?;
        let mut cell_layout = layout.clone();
        cell_layout.config.attn_dropout = cell.dropout;
        let (probe, history) = train(&cell_layout, &plan, store, &split)?;
        Ok((probe, history, plan, cell_layout))
    };
    let results = par::with_workers(workers, || {
        par::map(&cells, |cell| match run(cell) {
            Ok((_, h, _, _)) => CellResult {
                lr: cell.lr,
                wd: cell.wd,
                dropout: cell.dropout,
                val_bal_acc: h.val_bal_acc.last().copied().flatten(),
                train_bal_acc: h.train_bal_acc.last().copied(),
                steps: h.steps,
                seconds: h.seconds,
                error: None,
            },
            Err(e) => CellResult {
                lr: cell.lr,
                wd: cell.wd,
                dropout: cell.dropout,
                val_bal_acc: None,
                train_bal_acc: None,
                steps: 0,
                seconds: 0.0,
                error: Some(e.to_string()),
            },
        })
    });
    let leaderboard = Leaderboard::from_cells(results)?;
    let (probe, history, plan, layout) = run(&leaderboard.best().cell())?;
    Ok(GridOutcome {
        layout,
        plan,
        probe,
        history,
        split,
        leaderboard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{ProbeConfig, HeadCount};
    use crate::reprstore::testutil::tiny_store;
    use crate::reprstore::{LayerScheme, TokenKind, TokenSet};

    fn row(lr: f64, wd: f64, dropout: f64, val: Option<f64>) -> CellResult {
        CellResult {
            lr,
            wd,
            dropout,
            val_bal_acc: val,
            train_bal_acc: val,
            steps: 1000,
            seconds: 0.0,
            error: None,
        }
    }

    #[test]
    fn grid_sizes() {
        let store = tiny_store(20, &[4, 4, 4], &[TokenKind::Cls, TokenKind::Ap, TokenKind::Patch], 3);
        let fusion = ProbeLayout::resolve(
            &ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto),
            &store.meta,
        )
        .unwrap();
        assert_eq!(GridSpace::for_layout(&fusion).cells().len(), 63);
        let aat = ProbeLayout::resolve(&ProbeConfig::aat(), &store.meta).unwrap();
        let cells = GridSpace::for_layout(&aat).cells();
        assert_eq!(cells.len(), 9);
        assert!(cells.iter().all(|c| c.wd == 0.1));
        let wide = tiny_store(20, &[12; 4], &[TokenKind::Cls, TokenKind::Ap, TokenKind::Patch], 3);
        let hybrid = ProbeLayout::resolve(&ProbeConfig::hybrid(), &wide.meta).unwrap();
        let cells = GridSpace::for_layout(&hybrid).cells();
        assert_eq!(cells.len(), 3);
        assert!(cells.iter().all(|c| c.wd == 0.1 && c.dropout == 0.5));
        let lin = ProbeLayout::resolve(&ProbeConfig::linear_cls(), &store.meta).unwrap();
        assert_eq!(GridSpace::for_layout(&lin).cells().len(), 21);
    }

    #[test]
    fn tie_prefers_lower_weight_decay_then_lr_then_dropout() {
        let lb = Leaderboard::from_cells(vec![
            row(0.01, 1e-2, 0.0, Some(0.9)),
            row(0.1, 1e-4, 0.3, Some(0.9)),
            row(0.001, 1e-3, 0.0, Some(0.8)),
        ])
        .unwrap();
        assert_eq!(lb.winner, 1);
        let lb = Leaderboard::from_cells(vec![row(0.1, 1e-4, 0.1, Some(0.9)), row(0.01, 1e-4, 0.3, Some(0.9))]).unwrap();
        assert_eq!(lb.winner, 1);
        let lb = Leaderboard::from_cells(vec![row(0.1, 1e-4, 0.3, Some(0.9)), row(0.1, 1e-4, 0.1, Some(0.9))]).unwrap();
        assert_eq!(lb.winner, 1);
    }

    #[test]
    fn failed_cells_rank_last() {
        let mut bad = row(0.001, 1e-6, 0.0, None);
        bad.error = Some("diverged".into());
        let lb = Leaderboard::from_cells(vec![bad.clone(), row(0.1, 1.0, 0.3, Some(0.3))]).unwrap();
        assert_eq!(lb.winner, 1);
        assert!(Leaderboard::from_cells(vec![bad]).is_err());
    }

    #[test]
    fn ranking_is_total_and_order_free() {
        let mut rows = vec![
            row(0.1, 1e-3, 0.0, Some(0.5)),
            row(0.01, 1e-3, 0.0, Some(0.7)),
            row(0.001, 1e-6, 0.1, Some(0.7)),
            row(0.001, 1e-6, 0.0, None),
        ];
        let a = Leaderboard::from_cells(rows.clone()).unwrap();
        let best = a.best().clone();
        rows.reverse();
        let b = Leaderboard::from_cells(rows).unwrap();
        assert_eq!(b.best(), &best);
    }
}
