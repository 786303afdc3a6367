//! Training runs, hyperparameter grid search and seed studies.

mod grid;
mod seeds;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{balanced_accuracy, fmt17, AttentionAccumulator};
use crate::diffcore::{
    adamw_step, apply_jitter, clip_global_norm, compute_class_weights, cosine_lr, weighted_ce, AdamWConfig,
    OptState,
};
use crate::error::{Error, Result};
use crate::par;
use crate::probes::{init_probe, Probe, ProbeLayout};
use crate::reprstore::{assemble_rows, FeatureStore};
use crate::rng::RngStream;

pub use grid::{grid_search, rank_cells, CellResult, GridCell, GridOutcome, GridSpace, Leaderboard};
pub use seeds::{seed_study, SeedRun, SeedStudy};

pub const MAX_BATCH: usize = 2048;
pub const MIN_EPOCHS: usize = 40;
pub const MIN_BATCHES_PER_EPOCH: usize = 5;
pub const MIN_STEPS: usize = 1000;
pub const GRAD_CLIP: f64 = 5.0;
pub const JITTER_SIGMA: f64 = 0.05;
pub const JITTER_PROB: f64 = 0.5;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub total_steps: usize,
}

/// Batch size and epoch count for `n_train` samples: at most 2048 per batch,
/// at least 5 batches per epoch, at least 40 epochs and 1000 updates.
pub fn resolve_schedule(n_train: usize, requested_batch: usize, requested_epochs: usize) -> Result<Schedule> {
    if n_train < MIN_BATCHES_PER_EPOCH {
        return Err(Error::Config(format!(
            "need at least {MIN_BATCHES_PER_EPOCH} training samples, got {n_train}"
        )));
    }
    let batch_size = requested_batch
        .min(MAX_BATCH)
        .min(n_train / MIN_BATCHES_PER_EPOCH)
        .max(1);
    let batches_per_epoch = n_train.div_ceil(batch_size);
    let epochs = requested_epochs
        .max(MIN_EPOCHS)
        .max(MIN_STEPS.div_ceil(batches_per_epoch));
    Ok(Schedule {
        batch_size,
        batches_per_epoch,
        epochs,
        total_steps: epochs * batches_per_epoch,
    })
}

/// Learning rate, weight decay and attention dropout of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub attn_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub attn_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub jitter_sigma: f64,
    pub jitter_prob: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl TrainPlan {
    pub fn new(n_train: usize, hyper: Hyper, seed: u64) -> Result<Self> {
        Self::with_schedule(resolve_schedule(n_train, MAX_BATCH, MIN_EPOCHS)?, hyper, seed)
    }

    pub fn with_schedule(s: Schedule, hyper: Hyper, seed: u64) -> Result<Self> {
        let plan = TrainPlan {
            lr_max: hyper.lr,
            weight_decay: hyper.weight_decay,
            attn_dropout: hyper.attn_dropout,
            epochs: s.epochs,
            batch_size: s.batch_size,
            batches_per_epoch: s.batches_per_epoch,
            total_steps: s.total_steps,
            grad_clip: GRAD_CLIP,
            jitter_sigma: JITTER_SIGMA,
            jitter_prob: JITTER_PROB,
            seed,
            adam: AdamWConfig {
                weight_decay: hyper.weight_decay,
                ..AdamWConfig::default()
            },
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr_max,
            weight_decay: self.weight_decay,
            attn_dropout: self.attn_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < MIN_EPOCHS {
            return bad(format!("epochs {} below {MIN_EPOCHS}", self.epochs));
        }
        if self.batch_size == 0 || self.batch_size > MAX_BATCH {
            return bad(format!("batch size {} not in [1, {MAX_BATCH}]", self.batch_size));
        }
        if self.batches_per_epoch < MIN_BATCHES_PER_EPOCH {
            return bad(format!("{} batches per epoch, need {MIN_BATCHES_PER_EPOCH}", self.batches_per_epoch));
        }
        if self.total_steps < MIN_STEPS {
            return bad(format!("{} total steps, need {MIN_STEPS}", self.total_steps));
        }
        if !(self.lr_max >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return bad(format!("attention dropout {} not in [0, 1)", self.attn_dropout));
        }
        Ok(())
    }
}

/// Samples of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataView {
    pub split: String,
    pub indices: Vec<usize>,
}

impl DataView {
    /// Every sample of a split.
    pub fn full(store: &FeatureStore, split: &str) -> Result<Self> {
        Ok(DataView {
            split: split.to_string(),
            indices: (0..store.split(split)?.len()).collect(),
        })
    }

    pub fn labels(&self, store: &FeatureStore) -> Result<Vec<u32>> {
        let s = store.split(&self.split)?;
        Ok(self.indices.iter().map(|&i| s.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DataView,
    pub val: Option<DataView>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_bal_acc: Vec<f64>,
    pub val_bal_acc: Vec<Option<f64>>,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_bal_acc,val_bal_acc\n");
        for e in 0..self.train_loss.len() {
            let val = self.val_bal_acc[e].map(fmt17).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e + 1,
                fmt17(self.train_loss[e]),
                fmt17(self.train_bal_acc[e]),
                val
            ));
        }
        out
    }
}

/// Predictions (and optionally aggregated attention) of an eval-mode pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub preds: Vec<u32>,
    pub labels: Vec<u32>,
    pub attention: Option<AttentionAccumulator>,
}

impl Evaluation {
    pub fn balanced_accuracy(&self, num_classes: usize) -> Result<f64> {
        balanced_accuracy(&self.preds, &self.labels, num_classes)
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Eval-mode forward over a view (no dropout, no jitter), in parallel over
/// fixed chunks; results do not depend on the worker count.
pub fn evaluate(probe: &Probe, store: &FeatureStore, view: &DataView, with_attention: bool) -> Result<Evaluation> {
    let layout = probe.layout();
    let k = layout.num_classes;
    let chunks: Vec<&[usize]> = view.indices.chunks(EVAL_CHUNK).collect();
    let parts = par::map(&chunks, |idx| -> Result<(Vec<u32>, Vec<u32>, Option<AttentionAccumulator>)> {
        let batch = assemble_rows(store, &view.split, idx, &layout.rows, layout.d_model)?;
        let out = probe.forward(&batch.h, false, None)?;
        let preds = out.logits.data().chunks(k).map(argmax).collect();
        let acc = match (&out.attn, with_attention) {
            (Some(a), true) => {
                let mut acc = AttentionAccumulator::new(&layout.rows, layout.num_layers);
                acc.add(a)?;
                Some(acc)
            }
            _ => None,
        };
        Ok((preds, batch.labels, acc))
    });
    let mut preds = Vec::with_capacity(view.indices.len());
    let mut labels = Vec::with_capacity(view.indices.len());
    let mut attention: Option<AttentionAccumulator> = None;
    for part in parts {
        let (p, l, a) = part?;
        preds.extend(p);
        labels.extend(l);
        if let Some(a) = a {
            match attention.as_mut() {
                Some(acc) => acc.merge(&a)?,
                None => attention = Some(a),
            }
        }
    }
    Ok(Evaluation {
        preds,
        labels,
        attention,
    })
}

/// Trains one probe and returns the final-epoch model with its history.
///
/// Per epoch: reshuffle, then for each batch assemble, jitter, forward in
/// training mode, weighted cross-entropy, backward, clip to global norm 5,
/// AdamW with the cosine-annealed rate. Runs single-threaded apart from the
/// per-epoch evaluation passes and is bitwise deterministic given the seed.
pub fn train(layout: &ProbeLayout, plan: &TrainPlan, store: &FeatureStore, spec: &SplitSpec) -> Result<(Probe, TrainHistory)> {
    plan.validate()?;
    layout.check_store(store, &spec.train.split)?;
    if let Some(v) = &spec.val {
        layout.check_store(store, &v.split)?;
    }
    let started = Instant::now();
    let k = layout.num_classes;
    let train_labels = spec.train.labels(store)?;
    let weights = compute_class_weights(&train_labels, k)?;

    let mut init_rng = RngStream::new(plan.seed, "init");
    let mut shuffle_rng = RngStream::new(plan.seed, "shuffle");
    let mut dropout_rng = RngStream::new(plan.seed, "dropout");
    let mut jitter_rng = RngStream::new(plan.seed, "jitter");

    let mut layout = layout.clone();
    layout.config.attn_dropout = plan.attn_dropout;
    let mut probe = init_probe(&layout, &mut init_rng)?;
    let mut opt = OptState::new(probe.params(), plan.adam);

    let mut history = TrainHistory::default();
    let mut order = spec.train.indices.clone();
    let mut step = 0usize;
    for _epoch in 0..plan.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(plan.batch_size) {
            let mut batch = assemble_rows(store, &spec.train.split, idx, &layout.rows, layout.d_model)?;
            apply_jitter(&mut batch.h, plan.jitter_sigma, plan.jitter_prob, &mut jitter_rng, true);
            let out = probe.forward(&batch.h, true, Some(&mut dropout_rng))?;
            let (loss, dlogits) = weighted_ce(&out.logits, &batch.labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    config: format!("{} lr={} wd={} dropout={}", layout.config.label(), plan.lr_max, plan.weight_decay, plan.attn_dropout),
                });
            }
            let mut grads = probe.backward(&out.cache, &dlogits)?;
            clip_global_norm(&mut grads, plan.grad_clip);
            let lr = cosine_lr(step, plan.total_steps, plan.lr_max);
            adamw_step(probe.params_mut(), &grads, &mut opt, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    step,
                    config: format!("{} ({what})", layout.config.label()),
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        history.train_loss.push(loss_sum / batches.max(1) as f64);
        let train_eval = evaluate(&probe, store, &spec.train, false)?;
        history.train_bal_acc.push(train_eval.balanced_accuracy(k)?);
        let val = match &spec.val {
            Some(v) => evaluate(&probe, store, v, false)?.balanced_accuracy(k).ok(),
            None => None,
        };
        history.val_bal_acc.push(val);
    }
    history.steps = step;
    history.seconds = started.elapsed().as_secs_f64();
    Ok((probe, history))
}
