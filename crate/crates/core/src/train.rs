//! Minibatch training with validation-driven scheduling and early stopping.

use std::time::Instant;

use circuits_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SeriesInstance;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::optim::{AdamW, EarlyStopping, Plateau};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    /// Wall-clock budget; training stops after the first epoch that ends
    /// past it.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 64,
            max_epochs: 2000,
            early_stop_patience: 30,
            plateau_factor: 0.5,
            plateau_patience: 5,
            seed: 0,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(CoreError::Config("lr must be positive, batch_size nonzero, weight_decay >= 0".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(CoreError::Config("plateau_factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_njnll: f64,
    pub val_njnll: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_njnll,val_njnll,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_njnll, self.val_njnll, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_val_njnll: f64,
    /// `0` means the initialization was never improved upon.
    pub best_epoch: usize,
    pub skipped_steps: u64,
}

/// Mean njNLL over `instances`, skipping those without queries.
pub fn mean_njnll(model: &Model, instances: &[SeriesInstance]) -> Result<f64> {
    let values: Vec<Option<f64>> = instances
        .par_iter()
        .map(|inst| {
            if inst.queries.is_empty() {
                Ok(None)
            } else {
                model.njnll(inst).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let (sum, n) = values.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Mean loss and gradient over a batch; per-instance work runs in parallel,
/// the reduction is sequential in batch order.
pub fn batch_loss_and_grad(model: &Model, batch: &[&SeriesInstance]) -> Result<Option<(f64, Vec<Tensor>)>> {
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .filter(|inst| !inst.queries.is_empty())
        .map(|inst| model.njnll_and_grad(inst))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Ok(None);
    }
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for a in g.data_mut() {
            *a /= n;
        }
    }
    Ok(Some((loss / n, grads)))
}

/// Trains `model`, calling `on_epoch` after every epoch.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    train_set: &[SeriesInstance],
    val_set: &[SeriesInstance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.iter().all(|i| i.queries.is_empty()) {
        return Err(CoreError::EmptyTrainingSet);
    }
    let empty = train_set.iter().filter(|i| i.queries.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} training instances without queries are skipped");
    }
    let start = Instant::now();
    let mut opt = AdamW::new(model.params.tensors());
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params.tensors().to_vec();
    let mut best_val = if cfg.max_epochs == 0 {
        mean_njnll(&model, val_set)?
    } else {
        f64::INFINITY
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SeriesInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let Some((loss, grads)) = batch_loss_and_grad(&model, &batch)? else {
                continue;
            };
            let n = batch.iter().filter(|i| !i.queries.is_empty()).count();
            loss_sum += loss * n as f64;
            loss_n += n;
            opt.step(model.params.tensors_mut(), &grads, lr, cfg.weight_decay);
        }
        let val = mean_njnll(&model, val_set)?;
        plateau.observe(val);
        if stopper.observe(epoch, val) {
            best_params = model.params.tensors().to_vec();
            best_val = val;
        }
        let entry = EpochLog {
            epoch,
            train_njnll: loss_sum / loss_n.max(1) as f64,
            val_njnll: val,
            lr,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} lr {lr:.2e}",
            entry.train_njnll,
            entry.val_njnll
        );
        on_epoch(&entry);
        history.push(entry);
        if stopper.should_stop() {
            log::info!("early stopping after epoch {epoch}");
            break;
        }
        if cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() > s) {
            log::info!("time budget reached after epoch {epoch}");
            break;
        }
    }
    model.params.tensors_mut().clone_from_slice(&best_params);
    Ok(TrainOutcome {
        model,
        history,
        best_val_njnll: best_val,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        skipped_steps: opt.skipped,
    })
}
