//! Central finite-difference verification of recorded adjoints.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar map against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn check_gradients<F, M>(mut f: M, point: &Tensor<F>, eps: F) -> Result<F>
where
    F: Real,
    M: FnMut(&mut Tape<F>, Var) -> Result<Var>,
{
    if eps <= F::zero() {
        return Err(TensorError::Invalid("eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let loss = f(&mut tape, x)?;
    let loss_value = tape.value(loss).clone();
    if loss_value.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
    }
    if !loss_value.all_finite() {
        return Err(TensorError::NonFinite("loss at the evaluation point".into()));
    }
    let analytic = tape.backward(loss)?.get_or_zeros(x, point.shape());
    drop(tape);

    let mut eval = |p: Tensor<F>| -> Result<F> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let l = f(&mut tape, x)?;
        let v = tape.value(l).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("loss at a perturbed point".into()));
        }
        Ok(v)
    };

    let two = F::of(2.0);
    let mut worst = F::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(TensorError::NonFinite(format!("analytic gradient at {i}")));
        }
        let err = (a - numeric).abs() / a.abs().max(F::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
