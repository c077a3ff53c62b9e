//! Plain SGD with global-norm clipping and L1/L2 penalties.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Square root of the summed squared gradient over every parameter.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store.iter().map(|(_, p)| p.grad.norm_sq()).sum::<f64>().sqrt()
}

/// One update `θ ← θ − lr·(g + l1·sign θ + l2·θ)` after clipping the global
/// gradient norm to `clip_norm` (non-positive disables clipping). Gradients
/// are reset afterwards. Returns the gradient norm before clipping.
pub fn sgd_step(store: &mut ParamStore, lr: f64, l1: f64, l2: f64, clip_norm: f64) -> Result<f64> {
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let norm = global_grad_norm(store);
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    for p in store.iter_mut() {
        let grad = p.grad.data().to_vec();
        for (theta, g) in p.value.data_mut().iter_mut().zip(grad) {
            let mut step = scale * g;
            if l1 != 0.0 {
                step += l1 * sign(*theta);
            }
            if l2 != 0.0 {
                step += l2 * *theta;
            }
            *theta -= lr * step;
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{}` after update", p.name)));
        }
    }
    store.enforce_pins();
    store.zero_grads();
    Ok(norm)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
