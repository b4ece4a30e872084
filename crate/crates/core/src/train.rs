//! Maximum-likelihood training loop shared by every flow in the crate:
//! minibatch Adam, a held-out validation split and patience-based early
//! stopping that restores the best validation epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Optimisation and architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of rows used for training; the rest is validation.
    pub train_fraction: f64,
    /// Rows per Adam step; 0 means full batch.
    pub batch_size: usize,
    pub knots: usize,
    pub flow_layers: usize,
    pub nn_width: usize,
    pub nn_depth: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Halve the learning rate after this many epochs without improvement;
    /// 0 keeps it constant.
    pub lr_decay_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            max_epochs: 2000,
            patience: 100,
            train_fraction: 0.9,
            batch_size: 0,
            knots: 8,
            flow_layers: 5,
            nn_width: 50,
            nn_depth: 4,
            clip_norm: 0.0,
            lr_decay_patience: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidParameter("patience must be at least 1".into()));
        }
        if self.knots < 2 || self.flow_layers < 1 || self.nn_width < 1 {
            return Err(Error::InvalidParameter("need >= 2 knots, >= 1 layer, width >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Full-batch up to 50,000 rows unless a batch size is set.
    pub fn effective_batch(&self, n_train: usize) -> usize {
        if self.batch_size == 0 {
            n_train.min(50_000).max(1)
        } else {
            self.batch_size.min(n_train).max(1)
        }
    }
}

/// Per-epoch losses (mean negative log-likelihood per row).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Row indices for training and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Random split; when `strata` is given each stratum is split separately
    /// so every stratum appears on both sides.
    pub fn new(n: usize, strata: Option<&[u8]>, train_fraction: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::SPLIT);
        let groups: Vec<Vec<usize>> = match strata {
            Some(s) => {
                let mut keys: Vec<u8> = s.to_vec();
                keys.sort_unstable();
                keys.dedup();
                keys.iter().map(|k| (0..n).filter(|&i| s[i] == *k).collect()).collect()
            }
            None => vec![(0..n).collect()],
        };
        let mut train = Vec::new();
        let mut val = Vec::new();
        for mut g in groups {
            g.shuffle(&mut rng);
            let mut n_train = (g.len() as f64 * train_fraction).round() as usize;
            if g.len() >= 2 {
                n_train = n_train.clamp(1, g.len() - 1);
            }
            val.extend_from_slice(&g[n_train..]);
            g.truncate(n_train);
            train.extend(g);
        }
        train.sort_unstable();
        val.sort_unstable();
        Self { train, val }
    }
}

/// A per-row negative log-likelihood that can be recorded on a graph.
pub trait Objective {
    /// Mean negative log-likelihood over `rows`.
    fn loss<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<Var>;
}

const EVAL_CHUNK: usize = 8192;
const MIN_DECAYED_LR: f64 = 1e-5;

/// Mean loss over `rows` without recording gradients.
pub fn evaluate<O: Objective>(store: &ParamStore, obj: &O, rows: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(store);
        let l = obj.loss(&mut g, chunk)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / rows.len().max(1) as f64)
}

fn clip(store: &mut ParamStore, max_norm: f64) {
    let norm: f64 = store
        .tensors()
        .iter()
        .flat_map(|t| t.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for t in store.tensors_mut() {
            t.grad.iter_mut().for_each(|g| *g *= c);
        }
    }
}

/// Trains `store` in place and leaves it at the best validation epoch.
pub fn train<O: Objective>(store: &mut ParamStore, obj: &O, split: &Split, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InsufficientData("empty training or validation split".into()));
    }
    store.zero_grad();
    let mut adam = AdamState::new(store, cfg.learning_rate)?;
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let batch = cfg.effective_batch(split.train.len());

    let mut report = TrainReport { best_val_loss: evaluate(store, obj, &split.val)?, ..Default::default() };
    if !report.best_val_loss.is_finite() {
        return Err(Error::TrainingFailure { epoch: 0, reason: "initial validation loss is not finite".into() });
    }
    let mut best = store.snapshot();
    let mut order = split.train.clone();
    let mut last_change = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(batch) {
            let mut g = Graph::new(store);
            let loss = obj.loss(&mut g, rows)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                let op = g.first_non_finite().unwrap_or("loss");
                return Err(Error::TrainingFailure { epoch, reason: format!("non-finite loss from `{op}`") });
            }
            let grads = g.backward(loss).map_err(|e| Error::TrainingFailure { epoch, reason: e.to_string() })?;
            drop(g);
            store.accumulate(&grads);
            if cfg.clip_norm > 0.0 {
                clip(store, cfg.clip_norm);
            }
            adam.step(store).map_err(|e| Error::TrainingFailure { epoch, reason: e.to_string() })?;
            epoch_loss += value * rows.len() as f64;
        }
        let val = evaluate(store, obj, &split.val)?;
        if !val.is_finite() {
            return Err(Error::TrainingFailure { epoch, reason: "non-finite validation loss".into() });
        }
        report.train_loss.push(epoch_loss / order.len() as f64);
        report.val_loss.push(val);
        // strict improvement only: ties keep the earlier epoch
        if val < report.best_val_loss {
            report.best_val_loss = val;
            report.best_epoch = epoch;
            best = store.snapshot();
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        } else if cfg.lr_decay_patience > 0
            && epoch - report.best_epoch.max(last_change) >= cfg.lr_decay_patience
            && adam.lr > MIN_DECAYED_LR
        {
            adam.lr *= 0.5;
            last_change = epoch;
            log::debug!("epoch {epoch}: learning rate lowered to {:.2e}", adam.lr);
        }
    }
    store.restore(&best);
    store.zero_grad();
    log::debug!(
        "training stopped after {} epochs; best epoch {} (val {:.5})",
        report.val_loss.len(),
        report.best_epoch,
        report.best_val_loss
    );
    Ok(report)
}
