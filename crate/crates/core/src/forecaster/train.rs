use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::model::{ForecastModel, LossPositions, Tuning};
use crate::error::{Error, Result};
use crate::numerics::rng::rng_for;
use crate::numerics::{AdamW, Graph, ParamId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimiser steps; 0 means no cap.
    pub max_steps: usize,
    pub loss_positions: LossPositions,
    /// Learning-rate multiplier applied when the whole backbone is tuned.
    pub full_ft_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 10,
            patience: 3,
            max_steps: 0,
            loss_positions: LossPositions::All,
            full_ft_lr_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("full_ft_lr_scale", self.full_ft_lr_scale),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("train.{k} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_lr(&self, tuning: Tuning) -> f64 {
        match tuning {
            Tuning::Full => self.lr * self.full_ft_lr_scale,
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    pub steps: usize,
    /// Epoch whose parameters were kept (best validation loss).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub lr: f64,
}

/// Mean teacher-forced loss over `samples`.
pub fn mean_loss(model: &ForecastModel, samples: &[Sample], positions: LossPositions) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let l = model.net.sample_loss(&mut g, &model.store, s, positions)?;
        total += g.value(l).item();
    }
    Ok(total / samples.len().max(1) as f64)
}

fn snapshot(model: &ForecastModel) -> Vec<(ParamId, Tensor)> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

/// AdamW on the trainable parameters, mini-batches of per-window gradients
/// averaged, with early stopping on the validation loss. The best epoch's
/// parameters are kept. Deterministic for a given model seed.
pub fn train(
    model: &mut ForecastModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let lr = cfg.effective_lr(model.config().tuning);
    let mut opt = AdamW::new(lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        best_epoch: 0,
        stopped_early: false,
        lr,
    };
    let mut best: Option<(f64, Vec<(ParamId, Tensor)>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(model.seed, &format!("train/order/{epoch}")));
        let (mut epoch_loss, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                break;
            }
            let step = report.steps + 1;
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut grads = {
                    let mut g = Graph::new();
                    let l = model
                        .net
                        .sample_loss(&mut g, &model.store, &train_set[i], cfg.loss_positions)
                        .map_err(|e| match e {
                            Error::NonFinite { .. } => Error::Divergence {
                                step,
                                loss: f64::NAN,
                            },
                            other => other,
                        })?;
                    let value = g.value(l).item();
                    if !value.is_finite() {
                        return Err(Error::Divergence { step, loss: value });
                    }
                    epoch_loss += value;
                    seen += 1;
                    g.backward(l)?
                };
                grads.scale(scale);
                model.store.accumulate(&grads);
            }
            opt.step(&mut model.store);
            report.steps = step;
        }
        if seen == 0 {
            break;
        }
        let train_loss = epoch_loss / seen as f64;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(model, val_set, LossPositions::All)?)
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.6}{}",
            val.map_or(String::new(), |v| format!(", val {v:.6}"))
        );
        report.epochs.push(EpochLosses {
            epoch,
            train: train_loss,
            val,
        });
        let score = val.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, snapshot(model)));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience && val.is_some() {
                report.stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
            break;
        }
    }
    if let Some((_, params)) = best {
        if report.best_epoch + 1 != report.epochs.len() {
            for (id, value) in params {
                *model.store.value_mut(id) = value;
            }
        }
    }
    Ok(report)
}
