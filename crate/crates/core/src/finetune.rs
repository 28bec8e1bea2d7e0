//! Fine-tuning of the unmasked weights of a searched network.

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, make_batch, ordered_batches, Dataset, Partition, Split};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, SgdState};
use crate::searchspace::{BinaryMasks, GradRequest, Mode, ParamRole, Supernet};
use crate::seed::{self, tags};
use crate::trainer::{epoch_rng, evaluate, weight_step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Start from the supernet weights.
    Warm,
    /// Start from a fresh seeded draw.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub init: InitMode,
    /// Training loss counted as "reached" for the epochs-to-target metric.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            init: InitMode::Warm,
            target_loss: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_min", self.lr_min),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub epoch: usize,
    pub w_iter: usize,
    pub sgd: SgdState,
    /// First epoch count after which the training loss was at or below target.
    pub reached_target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochMetrics {
    pub epoch: usize,
    /// Eval-mode loss over the training split after the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Per-parameter update masks: `M_w` for live maskable weights, all-ones for
/// other parameters of live operations, all-zeros for dead operations, and
/// `None` (always trained) for global parameters.
pub fn update_masks(net: &Supernet, masks: &BinaryMasks) -> Vec<Option<Vec<f64>>> {
    net.weights
        .params
        .iter()
        .zip(&masks.w)
        .map(|(p, mw)| match p.role {
            ParamRole::Global => None,
            ParamRole::Op { cell, edge, op, .. } => {
                let alive = masks.op_alive(net.cell_kind_index(cell), edge, op);
                Some(match (alive, mw) {
                    (false, _) => vec![0.0; p.value.len()],
                    (true, Some(m)) => m.data().to_vec(),
                    (true, None) => vec![1.0; p.value.len()],
                })
            }
        })
        .collect()
}

/// Resets the running statistics and re-estimates them as the average of
/// per-batch statistics over `indices` under `masks`.
pub fn recalibrate_bn(net: &mut Supernet, data: &Dataset, indices: &[usize], masks: &BinaryMasks, batch_size: usize) -> Result<()> {
    net.reset_running_stats();
    let batches = ordered_batches(indices, batch_size);
    if batches.is_empty() {
        return Ok(());
    }
    let mut mean_acc: Vec<Vec<f64>> = net.weights.buffers.iter().map(|b| vec![0.0; b.mean.len()]).collect();
    let mut var_acc = mean_acc.clone();
    let mut hits = vec![0usize; net.weights.buffers.len()];
    for idx in batches {
        let b = make_batch(data, idx, Split::Train);
        let eval = net.loss(&b.x, &b.labels, Some(masks), Mode::Train, GradRequest::NONE)?;
        for st in &eval.batch_stats {
            let unbias = if st.count > 1 { st.count as f64 / (st.count - 1) as f64 } else { 1.0 };
            for c in 0..st.mean.len() {
                mean_acc[st.buffer][c] += st.mean[c];
                var_acc[st.buffer][c] += st.var[c] * unbias;
            }
            hits[st.buffer] += 1;
        }
    }
    for (i, buf) in net.weights.buffers.iter_mut().enumerate() {
        if hits[i] > 0 {
            let n = hits[i] as f64;
            buf.mean.iter_mut().zip(&mean_acc[i]).for_each(|(m, a)| *m = a / n);
            buf.var.iter_mut().zip(&var_acc[i]).for_each(|(v, a)| *v = a / n);
        }
    }
    Ok(())
}

/// Fine-tuned network: the supernet weights evaluated under fixed masks.
#[derive(Clone, Debug)]
pub struct FinalModel {
    pub net: Supernet,
    pub masks: BinaryMasks,
}

pub struct FinetuneOutcome {
    pub model: FinalModel,
    pub metrics: Vec<FinetuneEpochMetrics>,
    /// Epochs needed to reach the target training loss (`0` when met before
    /// training); runs that never reach it are censored at `epochs + 1`.
    pub epochs_to_target: Option<usize>,
}

/// Builds the starting point of fine-tuning: warm or re-initialised weights.
pub fn initial_model(net: &Supernet, masks: &BinaryMasks, cfg: &FinetuneConfig) -> Result<FinalModel> {
    masks.check_shapes(net)?;
    if net.is_degenerate(masks) {
        return Err(Error::Degenerate(
            "every path from the input to the classifier is masked; nothing to fine-tune".into(),
        ));
    }
    let mut model = net.clone();
    if cfg.init == InitMode::Random {
        model.reinit_weights(seed::derive_seed(cfg.seed, tags::RANDOM_INIT));
    }
    Ok(FinalModel { net: model, masks: masks.clone() })
}

pub fn new_state(model: &FinalModel) -> FinetuneState {
    FinetuneState {
        epoch: 0,
        w_iter: 0,
        sgd: SgdState::new(model.net.weights.params.iter().map(|p| p.value.len())),
        reached_target: None,
    }
}

/// Trains the unmasked weights of `model` from `state.epoch` to `cfg.epochs`.
/// With zero epochs the model is returned untouched.
pub fn finetune<F>(
    mut model: FinalModel,
    data: &Dataset,
    part: &Partition,
    cfg: &FinetuneConfig,
    state: &mut FinetuneState,
    mut on_epoch: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&FinalModel, &FinetuneState, &FinetuneEpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    let mut metrics = Vec::new();
    if cfg.epochs > 0 && part.train.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty train split".into()));
    }
    if cfg.epochs > 0 && state.epoch == 0 {
        recalibrate_bn(&mut model.net, data, &part.train, &model.masks, cfg.batch_size)?;
        if let Some(target) = cfg.target_loss {
            let (loss, _) = evaluate(&model.net, data, &part.train, Some(&model.masks), cfg.batch_size)?;
            if loss <= target {
                state.reached_target = Some(0);
            }
        }
    }
    let update = update_masks(&model.net, &model.masks);
    let n_batches = part.train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * n_batches;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, tags::FINETUNE, epoch);
        let mut lr = cfg.lr;
        for idx in batch_indices(&part.train, cfg.batch_size, &mut rng) {
            let batch = make_batch(data, idx, Split::Train);
            lr = cosine_lr(state.w_iter, total, cfg.lr, cfg.lr_min)?;
            weight_step(
                &mut model.net,
                &batch,
                Some(&model.masks),
                &mut state.sgd,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                cfg.grad_clip,
                Some(&update),
            )
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::Divergence { epoch, detail: format!("fine-tuning: {d}") },
                e => e,
            })?;
            state.w_iter += 1;
        }
        state.epoch += 1;
        let (train_loss, train_acc) = evaluate(&model.net, data, &part.train, Some(&model.masks), cfg.batch_size)?;
        let (val_loss, val_acc) = evaluate(&model.net, data, &part.val, Some(&model.masks), cfg.batch_size)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, detail: "fine-tuning: non-finite training loss".into() });
        }
        if let (Some(target), None) = (cfg.target_loss, state.reached_target) {
            if train_loss <= target {
                state.reached_target = Some(state.epoch);
            }
        }
        let m = FinetuneEpochMetrics { epoch, train_loss, train_acc, val_loss, val_acc, lr };
        on_epoch(&model, state, &m)?;
        metrics.push(m);
    }
    let epochs_to_target = cfg.target_loss.map(|_| state.reached_target.unwrap_or(cfg.epochs + 1));
    Ok(FinetuneOutcome { model, metrics, epochs_to_target })
}
