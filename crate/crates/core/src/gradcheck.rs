//! Finite-difference checks of network code with respect to parameters.

use vidpred_tensor::{check_gradients, Real, Tape, TensorError, Var};

use crate::error::Result;
use crate::params::{Cx, Mode, ParamId, Params};

fn to_tensor_err(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Worst relative error of the tape gradient of `loss` with respect to each
/// parameter in `ids`, against central differences with step `eps`.
///
/// Spectral normalization treats its singular vectors as constants in the
/// backward pass; the vectors are computed once at the base point and pinned
/// for the perturbed evaluations so both sides differentiate the same map.
pub fn check_param_gradients<F, M>(params: &Params<F>, ids: &[ParamId], mode: Mode, mut loss: M, eps: F) -> Result<F>
where
    F: Real,
    M: FnMut(&mut Cx<'_, F>) -> Result<Var>,
{
    let pins = {
        let mut cx = Cx::new(params, mode, None);
        loss(&mut cx)?;
        cx.take_spectral_log()
    };
    let mut worst = F::zero();
    for &id in ids {
        let err = check_gradients(
            |tape: &mut Tape<F>, x: Var| {
                let owned = std::mem::take(tape);
                let mut cx = Cx::with_tape(params, mode, None, owned);
                cx.pin_spectral(pins.clone());
                cx.bind(id, x);
                let l = loss(&mut cx).map_err(to_tensor_err)?;
                *tape = cx.into_tape();
                Ok(l)
            },
            params.get(id),
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
