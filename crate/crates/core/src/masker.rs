//! Hierarchical masking: real-valued masks over operations, edges and
//! weights, thresholded to binary masks and trained straight-through.

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, make_batch, Dataset, Partition, Split};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::optim::{AdamState, Slot};
use crate::searchspace::{BinaryMasks, GradRequest, Mode, Supernet};
use crate::seed::tags;
use crate::trainer::epoch_rng;

pub const DEFAULT_TAU: f64 = 5e-3;
pub const MASK_CLAMP: (f64, f64) = (-0.1, 1.0);

/// `1` where `m ≥ τ`, else `0`.
pub fn binarize(m: &[f64], tau: f64) -> Vec<f64> {
    m.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect()
}

fn binarize_tensor(t: &Tensor, tau: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), binarize(t.data(), tau)).expect("same shape")
}

/// Real-valued masks `M^r` shaped like `α`, `β` and the maskable weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierMasks {
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub w: Vec<Option<Tensor>>,
    pub tau: f64,
}

impl HierMasks {
    /// Every real entry set to `init`.
    pub fn init(net: &Supernet, init: f64, tau: f64) -> Self {
        let ones = BinaryMasks::ones(net);
        let fill = |t: &Tensor| Tensor::full(t.shape(), init);
        Self {
            alpha: ones.alpha.iter().map(fill).collect(),
            beta: ones.beta.iter().map(fill).collect(),
            w: ones.w.iter().map(|m| m.as_ref().map(fill)).collect(),
            tau,
        }
    }

    /// Thresholded binary view used to evaluate the masked supernet.
    pub fn project(&self) -> BinaryMasks {
        BinaryMasks {
            alpha: self.alpha.iter().map(|t| binarize_tensor(t, self.tau)).collect(),
            beta: self.beta.iter().map(|t| binarize_tensor(t, self.tau)).collect(),
            w: self.w.iter().map(|m| m.as_ref().map(|t| binarize_tensor(t, self.tau))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(self.w.iter().flatten()).all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_w_mask: f64,
    pub lr_arch_mask: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub mask_init: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr_w_mask: 1e-4,
            lr_arch_mask: 1e-5,
            lr_decay_factor: 10.0,
            lr_decay_epoch: 10,
            mask_init: 1e-2,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

impl MaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_w_mask >= 0.0 && self.lr_arch_mask >= 0.0) {
            return Err(Error::Config("mask learning rates must be non-negative".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if !self.mask_init.is_finite() || !self.tau.is_finite() {
            return Err(Error::Config("mask_init and tau must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `(weight-mask lr, arch-mask lr)` in effect during `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let s = if epoch >= self.lr_decay_epoch { 1.0 / self.lr_decay_factor } else { 1.0 };
        (self.lr_w_mask * s, self.lr_arch_mask * s)
    }
}

/// Optimiser state of the mask stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub epoch: usize,
    pub arch_adam: AdamState,
    pub w_adam: AdamState,
}

impl MaskState {
    pub fn new(masks: &HierMasks) -> Self {
        Self {
            epoch: 0,
            arch_adam: AdamState::new(masks.alpha.iter().chain(&masks.beta).map(Tensor::len)),
            w_adam: AdamState::new(masks.w.iter().flatten().map(Tensor::len)),
        }
    }
}

/// Applies gradients taken w.r.t. binary masks directly to the real masks
/// with Adam, then clamps to [`MASK_CLAMP`].
pub fn straight_through_step(adam: &mut AdamState, slots: &mut [Slot<'_>], lr: f64) -> Result<()> {
    adam.step(slots, lr, 0.0)?;
    for s in slots.iter_mut() {
        s.value.iter_mut().for_each(|v| *v = v.clamp(MASK_CLAMP.0, MASK_CLAMP.1));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_w_mask: f64,
    pub params: usize,
}

/// Fraction of ones per granularity, and the surviving fraction of cell
/// operation parameters (stem, preprocessing and head are never masked and
/// are left out of `params`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub alpha: f64,
    pub beta: f64,
    pub w: f64,
    pub params: f64,
}

fn ones_fraction<'a>(ts: impl Iterator<Item = &'a Tensor>) -> f64 {
    let (ones, total) = ts.fold((0usize, 0usize), |(o, n), t| {
        (o + t.data().iter().filter(|&&v| v != 0.0).count(), n + t.len())
    });
    if total == 0 {
        1.0
    } else {
        ones as f64 / total as f64
    }
}

pub fn sparsity_report(net: &Supernet, masks: &BinaryMasks) -> SparsityReport {
    let global = net.global_scalars();
    let op_total = net.count_params(None) - global;
    let op_alive = net.count_params(Some(masks)) - global;
    SparsityReport {
        alpha: ones_fraction(masks.alpha.iter()),
        beta: ones_fraction(masks.beta.iter()),
        w: ones_fraction(masks.w.iter().flatten()),
        params: if op_total == 0 { 1.0 } else { op_alive as f64 / op_total as f64 },
    }
}

/// Outcome of the mask stage.
#[derive(Clone, Debug)]
pub struct MaskOutcome {
    pub metrics: Vec<MaskEpochMetrics>,
    /// Set when the binary masks disconnect the network input from the classifier.
    pub degenerate: bool,
}

/// Trains `masks` on the full training set (train and validation splits)
/// while `net` stays frozen: each batch evaluates the masked supernet with
/// batch statistics and updates the real masks straight-through.
pub fn train_masks<F>(
    net: &Supernet,
    data: &Dataset,
    part: &Partition,
    cfg: &MaskTrainConfig,
    masks: &mut HierMasks,
    state: &mut MaskState,
    mut on_epoch: F,
) -> Result<MaskOutcome>
where
    F: FnMut(&HierMasks, &MaskState, &MaskEpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    masks.project().check_shapes(net)?;
    let indices = part.train_and_val();
    if indices.is_empty() {
        return Err(Error::Config("mask training needs a non-empty training set".into()));
    }
    let arch_names: Vec<String> = (0..masks.alpha.len())
        .map(|k| format!("mask_alpha[{k}]"))
        .chain((0..masks.beta.len()).map(|k| format!("mask_beta[{k}]")))
        .collect();
    let w_names: Vec<&str> = masks
        .w
        .iter()
        .zip(&net.weights.params)
        .filter(|(m, _)| m.is_some())
        .map(|(_, p)| p.name.as_str())
        .collect();
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let (lr_w, lr_arch) = cfg.learning_rates(epoch);
        let mut rng = epoch_rng(cfg.seed, tags::MASK_TRAIN, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in batch_indices(&indices, cfg.batch_size, &mut rng) {
            let batch = make_batch(data, idx, Split::Train);
            let binary = masks.project();
            let eval = net
                .loss(&batch.x, &batch.labels, Some(&binary), Mode::BatchStats, GradRequest::MASKS)
                .map_err(|e| match e {
                    Error::NonFinite(d) => Error::Divergence { epoch, detail: format!("mask stage: {d}") },
                    e => e,
                })?;
            loss_sum += eval.loss * batch.labels.len() as f64;
            correct += eval.correct;

            let g = &eval.grads;
            let mut slots: Vec<Slot<'_>> = masks
                .alpha
                .iter_mut()
                .chain(masks.beta.iter_mut())
                .zip(g.mask_alpha.iter().chain(&g.mask_beta))
                .zip(&arch_names)
                .map(|((m, g), name)| Slot { name, value: m.data_mut(), grad: g, update_mask: None })
                .collect();
            straight_through_step(&mut state.arch_adam, &mut slots, lr_arch)?;
            let mut slots: Vec<Slot<'_>> = masks
                .w
                .iter_mut()
                .flatten()
                .zip(g.mask_w.iter().flatten())
                .zip(&w_names)
                .map(|((m, g), name)| Slot { name, value: m.data_mut(), grad: g, update_mask: None })
                .collect();
            straight_through_step(&mut state.w_adam, &mut slots, lr_w)?;
        }
        state.epoch += 1;
        let m = MaskEpochMetrics {
            epoch,
            loss: loss_sum / indices.len() as f64,
            accuracy: correct as f64 / indices.len() as f64,
            lr_w_mask: lr_w,
            params: net.count_params(Some(&masks.project())),
        };
        on_epoch(masks, state, &m)?;
        metrics.push(m);
    }
    let degenerate = net.is_degenerate(&masks.project());
    Ok(MaskOutcome { metrics, degenerate })
}
