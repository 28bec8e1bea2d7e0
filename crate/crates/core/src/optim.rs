//! SGD with momentum, Adam, cosine annealing and gradient clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parameter tensor as seen by an optimiser step.
pub struct Slot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// Entries where this is `0.0` are left untouched (value and state).
    pub update_mask: Option<&'a [f64]>,
}

fn check_slots(slots: &[Slot<'_>], sizes: &[usize]) -> Result<()> {
    if slots.len() != sizes.len() {
        return Err(Error::dim("optimizer slots", sizes.len(), slots.len()));
    }
    for (s, &n) in slots.iter().zip(sizes) {
        if s.value.len() != n || s.grad.len() != n || s.update_mask.is_some_and(|m| m.len() != n) {
            return Err(Error::dim("optimizer slot", n, (s.name, s.value.len(), s.grad.len())));
        }
        if s.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", s.name)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
    pub fn step(&mut self, slots: &mut [Slot<'_>], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let sizes: Vec<usize> = self.velocity.iter().map(Vec::len).collect();
        check_slots(slots, &sizes)?;
        for (s, v) in slots.iter_mut().zip(&mut self.velocity) {
            for i in 0..v.len() {
                if s.update_mask.is_some_and(|m| m[i] == 0.0) {
                    continue;
                }
                v[i] = momentum * v[i] + s.grad[i] + weight_decay * s.value[i];
                s.value[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    /// Bias-corrected Adam step; weight decay is added to the gradient.
    pub fn step(&mut self, slots: &mut [Slot<'_>], lr: f64, weight_decay: f64) -> Result<()> {
        let sizes: Vec<usize> = self.m.iter().map(Vec::len).collect();
        check_slots(slots, &sizes)?;
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((s, m), v) in slots.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..m.len() {
                if s.update_mask.is_some_and(|mk| mk[i] == 0.0) {
                    continue;
                }
                let g = s.grad[i] + weight_decay * s.value[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                s.value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total_iters: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::Config("cosine schedule needs at least one iteration".into()));
    }
    let t = iter.min(total_iters) as f64 / total_iters as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos()))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(value: &'a mut [f64], grad: &'a [f64]) -> [Slot<'a>; 1] {
        [Slot { name: "p", value, grad, update_mask: None }]
    }

    #[test]
    fn sgd_examples() {
        let mut x = [1.0];
        SgdState::new([1]).step(&mut slot(&mut x, &[0.5]), 0.1, 0.0, 0.0).unwrap();
        assert!((x[0] - 0.95).abs() < 1e-15);

        let mut x = [0.7];
        SgdState::new([1]).step(&mut slot(&mut x, &[0.0]), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(x[0], 0.7);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        let g = 0.3;
        let mut s = SgdState::new([1]);
        let mut x = [2.0];
        s.step(&mut slot(&mut x, &[g]), 0.1, 0.9, 0.0).unwrap();
        s.step(&mut slot(&mut x, &[g]), 0.1, 0.9, 0.0).unwrap();
        // v1 = g, v2 = 0.9 g + g
        let v2 = 0.9 * g + g;
        assert!((s.velocity[0][0] - 1.9 * g).abs() < 1e-15);
        let expected = 2.0 - 0.1 * g - 0.1 * v2;
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut x = [1.0];
        let err = SgdState::new([1]).step(&mut slot(&mut x, &[f64::NAN]), 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        let err = AdamState::new([1]).step(&mut slot(&mut x, &[f64::INFINITY]), 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn adam_examples() {
        let mut x = [0.4];
        AdamState::new([1]).step(&mut slot(&mut x, &[0.0]), 1e-3, 0.0).unwrap();
        assert_eq!(x[0], 0.4);

        AdamState::new([1]).step(&mut slot(&mut x, &[-2.5]), 1e-3, 0.0).unwrap();
        let delta = x[0] - 0.4;
        assert!(delta > 0.0 && (delta - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_matches_reference_trace_on_quadratic() {
        // reference: plain scalar Adam on f(x) = (x - 3)^2, written out longhand
        let (lr, mut x_ref, mut m, mut v) = (0.05, 0.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=5 {
            let g = 2.0 * (x_ref - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + 1e-8);
            trace.push(x_ref);
        }
        let mut a = AdamState::new([1]);
        let mut x = [0.0];
        for want in trace {
            let g = [2.0 * (x[0] - 3.0)];
            let mut slots = [Slot { name: "x", value: &mut x, grad: &g, update_mask: None }];
            a.step(&mut slots, lr, 0.0).unwrap();
            assert!((x[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn update_mask_freezes_entries() {
        let mut s = SgdState::new([2]);
        let mut x = [1.0, 1.0];
        let g = [1.0, 1.0];
        let mask = [0.0, 1.0];
        let mut slots = [Slot { name: "x", value: &mut x, grad: &g, update_mask: Some(&mask) }];
        s.step(&mut slots, 0.1, 0.9, 0.1).unwrap();
        assert_eq!(x[0], 1.0);
        assert!(x[1] < 1.0);
        assert_eq!(s.velocity[0][0], 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0).unwrap(), 0.1);
        assert!((cosine_lr(100, 100, 0.1, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1, 0.02).unwrap() - 0.06).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 5.0);
        assert_eq!(small[0][0], 0.1);
    }
}
