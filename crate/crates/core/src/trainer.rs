//! First-order bilevel supernet training with warm start and stochastic
//! architecture-update triggering.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, make_batch, ordered_batches, Batch, Dataset, Partition, Split};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, cosine_lr, AdamState, SgdState, Slot};
use crate::searchspace::{BinaryMasks, GradRequest, Mode, Supernet};
use crate::seed::{self, tags};

/// Probability schedule `σ(iter)` for triggering an architecture step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SigmaSchedule {
    /// `1` for the first two thirds of post-warm-up opportunities, then linear to `0`.
    FinalThird,
    /// `max(0, 1 − iter/horizon)`.
    Linear { horizon: usize },
    Always,
    Never,
}

/// `σ(iter)` given `total` post-warm-up opportunities.
pub fn trigger_probability(iter: usize, schedule: &SigmaSchedule, total: usize) -> f64 {
    match *schedule {
        SigmaSchedule::Always => 1.0,
        SigmaSchedule::Never => 0.0,
        SigmaSchedule::Linear { horizon } => {
            if horizon == 0 {
                if iter == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (1.0 - iter as f64 / horizon as f64).max(0.0)
            }
        }
        SigmaSchedule::FinalThird => {
            let decay = total / 3;
            let hold = total - decay;
            if iter <= hold || decay == 0 {
                1.0
            } else {
                (1.0 - (iter - hold) as f64 / decay as f64).max(0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub warmup_epochs: usize,
    pub train_fraction: f64,
    pub sigma: SigmaSchedule,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            w_lr: 0.1,
            w_lr_min: 0.0,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            warmup_epochs: 10,
            train_fraction: 0.8,
            sigma: SigmaSchedule::FinalThird,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("w_lr", self.w_lr),
            ("w_lr_min", self.w_lr_min),
            ("w_momentum", self.w_momentum),
            ("w_weight_decay", self.w_weight_decay),
            ("arch_lr", self.arch_lr),
            ("arch_weight_decay", self.arch_weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to resume supernet training mid-run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub w_iter: usize,
    /// Post-warm-up architecture-update opportunities seen.
    pub arch_iter: usize,
    pub arch_steps: usize,
    pub sgd: SgdState,
    pub adam: AdamState,
    pub best_val_loss: f64,
}

impl TrainState {
    pub fn new(net: &Supernet) -> Self {
        Self {
            epoch: 0,
            w_iter: 0,
            arch_iter: 0,
            arch_steps: 0,
            sgd: SgdState::new(net.weights.params.iter().map(|p| p.value.len())),
            adam: AdamState::new(net.arch.alpha.iter().chain(&net.arch.beta).map(|t| t.len())),
            best_val_loss: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate of the last weight step in the epoch.
    pub lr: f64,
    pub arch_steps: usize,
}

/// Record of which samples each kind of step consumed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProvenanceLog {
    pub weight_samples: BTreeSet<usize>,
    pub arch_samples: BTreeSet<usize>,
    pub weight_batches: usize,
    pub arch_batches: usize,
}

fn require_split(batch: &Batch, expected: Split, step: &'static str) -> Result<()> {
    if batch.split == expected {
        Ok(())
    } else {
        Err(Error::BatchSplit {
            step,
            expected: expected.name(),
            got: batch.split.name(),
        })
    }
}

/// Mean loss and accuracy over `indices` in eval mode.
pub fn evaluate(
    net: &Supernet,
    data: &Dataset,
    indices: &[usize],
    masks: Option<&BinaryMasks>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0);
    for idx in ordered_batches(indices, batch_size) {
        let b = make_batch(data, idx, Split::Test);
        let e = net.loss(&b.x, &b.labels, masks, Mode::Eval, GradRequest::NONE)?;
        loss += e.loss * b.labels.len() as f64;
        correct += e.correct;
    }
    Ok((loss / indices.len() as f64, correct as f64 / indices.len() as f64))
}

/// Per-epoch generator for stream `tag`; resuming at any epoch reproduces it.
pub fn epoch_rng(seed: u64, tag: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed::derive_seed(seed, tag), epoch as u64)
}

/// Position of each validation batch within the epoch: arch step `j` runs
/// just before weight step `⌊j·T/V⌋`, spreading them evenly.
fn arch_slot(j: usize, n_train: usize, n_val: usize) -> usize {
    j * n_train / n_val
}

/// One weight step: SGD on `w` with cosine learning rate and clipping.
/// Returns `(loss, correct)`.
pub(crate) fn weight_step(
    net: &mut Supernet,
    batch: &Batch,
    masks: Option<&BinaryMasks>,
    sgd: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    grad_clip: f64,
    update_masks: Option<&[Option<Vec<f64>>]>,
) -> Result<(f64, usize)> {
    require_split(batch, Split::Train, "weight")?;
    let mut eval = net.loss(&batch.x, &batch.labels, masks, Mode::Train, GradRequest::WEIGHTS)?;
    if grad_clip > 0.0 {
        clip_grad_norm(&mut eval.grads.weights, grad_clip);
    }
    let mut slots: Vec<Slot<'_>> = net
        .weights
        .params
        .iter_mut()
        .zip(&eval.grads.weights)
        .enumerate()
        .map(|(i, (p, g))| Slot {
            name: &p.name,
            value: p.value.data_mut(),
            grad: g,
            update_mask: update_masks.and_then(|u| u[i].as_deref()),
        })
        .collect();
    sgd.step(&mut slots, lr, momentum, weight_decay)?;
    net.update_running_stats(&eval.batch_stats);
    Ok((eval.loss, eval.correct))
}

fn arch_step(net: &mut Supernet, batch: &Batch, adam: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    require_split(batch, Split::Val, "architecture")?;
    let eval = net.loss(&batch.x, &batch.labels, None, Mode::BatchStats, GradRequest::ARCH)?;
    let names: Vec<String> = (0..net.arch.alpha.len())
        .map(|k| format!("alpha[{k}]"))
        .chain((0..net.arch.beta.len()).map(|k| format!("beta[{k}]")))
        .collect();
    let grads = eval.grads.alpha.iter().chain(&eval.grads.beta);
    let values = net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut());
    let mut slots: Vec<Slot<'_>> = values
        .zip(grads)
        .zip(&names)
        .map(|((v, g), name)| Slot {
            name,
            value: v.data_mut(),
            grad: g,
            update_mask: None,
        })
        .collect();
    adam.step(&mut slots, lr, weight_decay)
}

/// Trains `net` from `state.epoch` up to `cfg.epochs`.
///
/// Each epoch interleaves one SGD step on `w` per training batch with, for
/// each validation batch once warm-up is over, an Adam step on `α, β`
/// taken with probability `σ`. `on_epoch` runs after every epoch (metrics
/// sinks, checkpoints); its error aborts training.
pub fn train_supernet<F>(
    net: &mut Supernet,
    data: &Dataset,
    part: &Partition,
    cfg: &TrainConfig,
    state: &mut TrainState,
    provenance: &mut ProvenanceLog,
    on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&Supernet, &TrainState, &EpochMetrics) -> Result<()>,
{
    train_supernet_until(net, data, part, cfg, cfg.epochs, state, provenance, on_epoch)
}

/// [`train_supernet`] that stops once `stop_epoch` epochs are complete, with
/// schedules still laid out over `cfg.epochs`; resuming later continues the
/// uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_supernet_until<F>(
    net: &mut Supernet,
    data: &Dataset,
    part: &Partition,
    cfg: &TrainConfig,
    stop_epoch: usize,
    state: &mut TrainState,
    provenance: &mut ProvenanceLog,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&Supernet, &TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    if part.train.is_empty() || part.val.is_empty() {
        return Err(Error::Config("supernet training needs non-empty train and validation splits".into()));
    }
    let n_train = part.train.len().div_ceil(cfg.batch_size);
    let n_val = part.val.len().div_ceil(cfg.batch_size);
    let total_w = cfg.epochs * n_train;
    let total_arch = (cfg.epochs - cfg.warmup_epochs) * n_val;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs.min(stop_epoch) {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, tags::SUPERNET_TRAIN, epoch);
        let mut trigger = epoch_rng(cfg.seed, tags::TRIGGER, epoch);
        let train_batches = batch_indices(&part.train, cfg.batch_size, &mut rng);
        let val_batches = batch_indices(&part.val, cfg.batch_size, &mut rng);
        let mut val_iter = val_batches.into_iter().enumerate().peekable();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = cfg.w_lr;
        let mut arch_steps = 0;
        let diverged = |detail: String| Error::Divergence {
            epoch,
            detail: format!("{detail}; last good checkpoint is from epoch {epoch}"),
        };
        for (t, idx) in train_batches.into_iter().enumerate() {
            while let Some((_, vidx)) = val_iter.next_if(|(j, _)| arch_slot(*j, n_train, n_val) <= t) {
                if epoch < cfg.warmup_epochs {
                    continue;
                }
                let p = trigger_probability(state.arch_iter, &cfg.sigma, total_arch);
                state.arch_iter += 1;
                if trigger.gen::<f64>() < p {
                    let batch = make_batch(data, vidx, Split::Val);
                    arch_step(net, &batch, &mut state.adam, cfg.arch_lr, cfg.arch_weight_decay).map_err(|e| match e {
                        Error::NonFinite(d) => diverged(d),
                        e => e,
                    })?;
                    provenance.arch_samples.extend(&batch.indices);
                    provenance.arch_batches += 1;
                    arch_steps += 1;
                    state.arch_steps += 1;
                }
            }
            let batch = make_batch(data, idx, Split::Train);
            lr = cosine_lr(state.w_iter, total_w, cfg.w_lr, cfg.w_lr_min)?;
            let (loss, c) = weight_step(
                net,
                &batch,
                None,
                &mut state.sgd,
                lr,
                cfg.w_momentum,
                cfg.w_weight_decay,
                cfg.grad_clip,
                None,
            )
            .map_err(|e| match e {
                Error::NonFinite(d) => diverged(d),
                e => e,
            })?;
            provenance.weight_samples.extend(&batch.indices);
            provenance.weight_batches += 1;
            state.w_iter += 1;
            loss_sum += loss * batch.labels.len() as f64;
            correct += c;
            seen += batch.labels.len();
        }
        let (val_loss, val_acc) = evaluate(net, data, &part.val, None, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(diverged("non-finite validation loss".into()));
        }
        state.best_val_loss = state.best_val_loss.min(val_loss);
        state.epoch += 1;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
            lr,
            arch_steps,
        };
        on_epoch(net, state, &m)?;
        log.push(m);
    }
    Ok(log)
}
