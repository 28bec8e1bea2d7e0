//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor added to the numerical derivative in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Max over coordinates of `|analytic − numeric| / (|numeric| + 1e-8)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Same as [`finite_diff_check`] over several input tensors at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + step;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - step;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
