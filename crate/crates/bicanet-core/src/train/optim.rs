//! Poly learning-rate schedule and SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::layers::ParamStore;

/// `lr_base * (1 - iter/max_iter)^power`; iterations past the horizon clamp
/// to zero with a warning.
pub fn poly_lr(lr_base: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if max_iter == 0 {
        return 0.0;
    }
    if iter > max_iter {
        eprintln!("warning: poly_lr called with iter {iter} > max_iter {max_iter}; clamping to 0");
        return 0.0;
    }
    lr_base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// One SGD step over every learnable parameter:
/// `v <- momentum * v + (grad + weight_decay * param)`,
/// `param <- param - lr * v`.
///
/// Batch-norm scale/shift are exempt from weight decay. Gradients must have
/// been stored on the parameters beforehand.
pub fn sgd_step(
    store: &mut ParamStore,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.kind(id);
        if !kind.learnable() {
            continue;
        }
        let grad = match store.grad(id) {
            Some(g) => g.to_vec(),
            None => return Err(Error::MissingGradient(store.name(id).to_string())),
        };
        let wd = if kind.weight_decay_applies() {
            weight_decay
        } else {
            0.0
        };
        // Values are read before the mutable update below.
        let params: Vec<f32> = store.value(id).data().to_vec();
        let velocity = store.velocity_mut(id);
        for (v, (&g, &p)) in velocity.iter_mut().zip(grad.iter().zip(&params)) {
            *v = (momentum * *v as f64 + (g as f64 + wd * p as f64)) as f32;
        }
        let velocity: Vec<f32> = store.velocity(id).to_vec();
        let data = store.value_mut_raw(id);
        for (p, &v) in data.iter_mut().zip(&velocity) {
            *p = (*p as f64 - lr * v as f64) as f32;
        }
    }
    Ok(())
}
