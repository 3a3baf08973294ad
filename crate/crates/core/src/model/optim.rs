//! SGD with classical momentum and L2 weight decay.

use super::{ModelParams, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
pub fn sgd_step<T: Scalar>(
    state: &mut ModelState<T>,
    grads: &ModelParams<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Input("sgd_step: lr must be > 0".into()));
    }
    for (name, g) in grads.visit() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "sgd_step: non-finite gradient in {name} at step {}",
                state.step
            )));
        }
    }
    let m = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    let lr = T::from_f64(lr);
    for (((_, param), (_, vel)), (_, grad)) in state
        .params
        .visit_mut()
        .into_iter()
        .zip(state.velocity.visit_mut())
        .zip(grads.visit())
    {
        for ((p, v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut())
            .zip(grad.data())
        {
            *v = m * *v + g + wd * *p;
            *p = *p - lr * *v;
        }
    }
    state.step += 1;
    if !state.params.all_finite() {
        return Err(Error::Numeric(format!(
            "sgd_step: parameters diverged at step {}",
            state.step
        )));
    }
    Ok(())
}
