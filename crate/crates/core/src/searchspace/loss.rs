use super::forward::{collect_batch_stats, BatchStat, BinaryMasks, Mode};
use super::supernet::Supernet;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor};

/// Which gradients a loss evaluation should produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub arch: bool,
    pub masks: bool,
}

impl GradRequest {
    pub const NONE: Self = Self { weights: false, arch: false, masks: false };
    pub const WEIGHTS: Self = Self { weights: true, arch: false, masks: false };
    pub const ARCH: Self = Self { weights: false, arch: true, masks: false };
    pub const MASKS: Self = Self { weights: false, arch: false, masks: true };

    fn any(self) -> bool {
        self.weights || self.arch || self.masks
    }
}

/// Gradients of the mean cross-entropy; empty vectors for targets not requested.
#[derive(Clone, Debug, Default)]
pub struct GradSet {
    pub weights: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub mask_alpha: Vec<Vec<f64>>,
    pub mask_beta: Vec<Vec<f64>>,
    pub mask_w: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub correct: usize,
    pub grads: GradSet,
    /// Batch statistics, populated in [`Mode::Train`].
    pub batch_stats: Vec<BatchStat>,
}

/// Index of the largest entry of each logits row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

impl Supernet {
    /// Mean cross-entropy of `x` against `labels`, with accuracy count and
    /// the requested gradients. The supernet itself is never modified.
    pub fn loss(
        &self,
        x: &Tensor,
        labels: &[usize],
        masks: Option<&BinaryMasks>,
        mode: Mode,
        want: GradRequest,
    ) -> Result<LossEval> {
        if let Some(m) = masks {
            m.check_shapes(self)?;
        } else if want.masks {
            return Err(Error::Config("mask gradients requested without masks".into()));
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, want.weights, want.arch);
        let mb = masks.map(|m| m.bind(&mut tape, want.masks));
        let input = tape.constant(x.clone());
        let pass = self.forward_tape(&mut tape, &bind, mb.as_ref(), input, mode)?;
        let loss_var = tape.cross_entropy(pass.logits, labels)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let correct = argmax_rows(tape.value(pass.logits)).iter().zip(labels).filter(|(p, l)| p == l).count();
        let batch_stats = if mode == Mode::Train { collect_batch_stats(&tape, &pass.bn_nodes) } else { Vec::new() };
        let mut grads = GradSet::default();
        if want.any() {
            let g = tape.backward(loss_var)?;
            if want.weights {
                grads.weights = bind.params.iter().map(|&v| g.get(v).into_data()).collect();
            }
            if want.arch {
                grads.alpha = bind.alpha.iter().map(|&v| g.get(v).into_data()).collect();
                grads.beta = bind.beta.iter().map(|&v| g.get(v).into_data()).collect();
            }
            if let (true, Some(mb)) = (want.masks, &mb) {
                grads.mask_alpha = mb.alpha.iter().map(|&v| g.get(v).into_data()).collect();
                grads.mask_beta = mb.beta.iter().map(|&v| g.get(v).into_data()).collect();
                grads.mask_w = mb.w.iter().map(|v| v.map(|v| g.get(v).into_data())).collect();
            }
        }
        Ok(LossEval { loss, correct, grads, batch_stats })
    }
}
