//! Losses, optimizers, schedules, metrics and the training loop.

mod loss;
mod metrics;
mod optim;
mod schedule;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{bce_onehot_loss, cce_loss, Loss};
pub use metrics::{class_counts, imbalance_ratio, label_rank, metrics, predicted_class, MetricsReport};
pub use optim::{adam_step, adamw_step, AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use schedule::{cosine_lr, Restart, WarmRestart};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Family, TraceOptions, TransformerModel};
use crate::tensor::Tensor;

/// Global gradient norm used when clipping is enabled.
pub const CLIP_NORM: f64 = 1.0;

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_shard() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: Loss,
    /// Peak learning rate; the family default when absent.
    #[serde(default)]
    pub lr_max: Option<f64>,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub warm_restart: Option<WarmRestart>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Clip the global gradient norm to [`CLIP_NORM`].
    #[serde(default)]
    pub grad_clip: bool,
    /// Samples per gradient shard; shards run in parallel and are summed in
    /// a fixed order, so results do not depend on the thread count.
    #[serde(default = "default_shard")]
    pub shard_size: usize,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl TrainConfig {
    /// 1e-3 for B-cos families, 1e-4 otherwise.
    pub fn default_lr(family: Family) -> f64 {
        if family.is_bcos() {
            1e-3
        } else {
            1e-4
        }
    }

    pub fn lr_for(&self, family: Family) -> f64 {
        self.lr_max.unwrap_or_else(|| Self::default_lr(family))
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        let lr = self.lr_for(family);
        let bad = |m: String| Err(Error::Config(m));
        if !(lr.is_finite() && self.lr_min >= 0.0 && lr >= self.lr_min) {
            return bad(format!("need lr_max >= lr_min >= 0, got {lr} and {}", self.lr_min));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return bad("batch_size and shard_size must be positive".into());
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return bad("epochs and max_steps must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return bad(format!(
                "invalid Adam settings betas {:?}, eps {}",
                self.betas, self.adam_eps
            ));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if let Some(r) = self.warm_restart {
            if r.lr_divisor <= 0.0 || r.restart_epoch == 0 || r.restart_epoch >= self.epochs {
                return bad(format!(
                    "warm restart at epoch {} of {} is out of range",
                    r.restart_epoch, self.epochs
                ));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Encoded images `[N, C, H, W]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for an image batch of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the samples at `indices` into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Examples> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::dim(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Examples::new(
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub f1_macro: f64,
    pub top1: f64,
    pub top3: f64,
    pub lr: f64,
}

impl EpochRecord {
    fn new(epoch: usize, split: &str, loss: f64, m: &MetricsReport, lr: f64) -> Self {
        Self {
            epoch,
            split: split.to_owned(),
            loss,
            f1_macro: m.f1_macro,
            top1: m.top1,
            top3: m.top3,
            lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation macro F1.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    /// Train-split report of the last epoch, accumulated over its batches.
    pub last_train: MetricsReport,
}

/// Loss, logits and parameter gradients of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: Vec<Vec<f64>>,
}

/// Evaluates the batch in shards of `shard` samples and combines them in
/// shard order.
pub fn batch_gradients(model: &TransformerModel, batch: &Examples, loss: Loss, shard: usize) -> Result<BatchGradients> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let shard = shard.max(1);
    let starts: Vec<usize> = (0..n).step_by(shard).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + shard).min(n)).collect();
            let part = batch.select(&idx)?;
            let tape = Tape::new();
            let b = model.params().bind(&tape);
            let x = tape.constant(part.images.clone());
            let pass = model.forward_on(&b, x, TraceOptions::default())?;
            let l = loss.on_tape(&tape, pass.logits, &part.labels)?;
            tape.backward(l)?;
            Ok((idx.len(), tape.value(l)?.item(), tape.value(pass.logits)?, b.grads()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = model.config().num_classes;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n * k);
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (m, l, z, g) in parts {
        let w = m as f64 / n as f64;
        total += w * l;
        logits.extend_from_slice(z.data());
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, v)| *a += w * v);
        }
    }
    Ok(BatchGradients {
        loss: total,
        logits: Tensor::new(vec![n, k], logits)?,
        grads,
    })
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Loss and metrics of `model` on a whole split.
pub fn evaluate(model: &TransformerModel, data: &Examples, loss: Loss, chunk: usize) -> Result<(f64, MetricsReport)> {
    let logits = model.logits(&data.images, chunk)?;
    let l = loss.evaluate(&logits, &data.labels)?;
    Ok((l, metrics(&logits, &data.labels, model.config().num_classes)?))
}

/// Trains `model` in place, writing one JSON line per epoch and split to
/// `log`.
///
/// Train-split metrics are accumulated over the epoch's batches. The
/// returned checkpoint holds the parameters with the best validation macro
/// F1; earlier epochs win ties.
pub fn train(
    model: &mut TransformerModel,
    train_set: &Examples,
    val_set: &Examples,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let family = model.config().family;
    cfg.validate(family)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let k = model.config().num_classes;
    let lr_max = cfg.lr_for(family);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let scheduled = per_epoch * cfg.epochs;
    let total_steps = cfg.max_steps.map_or(scheduled, |m| m.min(scheduled));
    let restart = cfg.warm_restart.map(|r| Restart {
        at_step: r.restart_epoch * per_epoch,
        divisor: r.lr_divisor,
    });
    let mut opt = Optimizer::new(cfg.optimizer, cfg.adam(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut step = 0usize;
    let mut last_train = None;
    let mut write = |rec: &EpochRecord| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").map_err(|e| Error::Format(format!("metrics log write failed: {e}")))
    };

    for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        order.shuffle(&mut rng);
        let mut seen = Vec::new();
        let mut logits = Vec::new();
        let mut loss_sum = 0.0;
        let mut lr = lr_max;
        for idx in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            lr = cosine_lr(step, total_steps, lr_max, cfg.lr_min, restart);
            let batch = train_set.select(idx)?;
            let mut bg = match batch_gradients(model, &batch, cfg.loss, cfg.shard_size) {
                Err(Error::Numerical(m)) => {
                    return Err(Error::Numerical(format!(
                        "non-finite training state at step {step}: {m}, lr {lr:e}, grad norm undefined"
                    )))
                }
                other => other?,
            };
            let norm = global_norm(&bg.grads);
            if !bg.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training state at step {step}: loss {}, lr {lr:e}, grad norm {norm}",
                    bg.loss
                )));
            }
            if cfg.grad_clip && norm > CLIP_NORM {
                let s = CLIP_NORM / norm;
                bg.grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
            opt.step(model.params_mut(), &bg.grads, lr)?;
            step += 1;
            loss_sum += bg.loss * idx.len() as f64;
            logits.extend_from_slice(bg.logits.data());
            seen.extend(batch.labels);
        }
        let train_logits = Tensor::new(vec![seen.len(), k], logits)?;
        let train_report = metrics(&train_logits, &seen, k)?;
        let train_rec = EpochRecord::new(epoch, "train", loss_sum / seen.len() as f64, &train_report, lr);
        let (val_loss, val_report) = evaluate(model, val_set, cfg.loss, cfg.shard_size.max(16))?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss after epoch {epoch} (step {step}, lr {lr:e})"
            )));
        }
        let val_rec = EpochRecord::new(epoch, "val", val_loss, &val_report, lr);
        write(&train_rec)?;
        write(&val_rec)?;
        history.push(train_rec);
        history.push(val_rec);
        if best.as_ref().is_none_or(|(f1, _, _)| val_report.f1_macro > *f1) {
            best = Some((
                val_report.f1_macro,
                epoch,
                Checkpoint::from_model(model, step as u64, cfg.seed),
            ));
        }
        last_train = Some(train_report);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        steps: step,
        last_train: last_train.expect("at least one epoch runs"),
    })
}

#[cfg(test)]
mod tests;
