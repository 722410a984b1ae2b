//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{AdamState, Gradients, ParameterStore};
use crate::tensor::{c, Float};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// `p ← p − lr · m̂ / (√v̂ + eps)` with `m̂ = m / (1 − β₁ᵗ)` and
/// `v̂ = v / (1 − β₂ᵗ)`.
pub fn adam_step<T: Float>(
    store: &mut ParameterStore<T>,
    grads: &Gradients<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for name in store.names() {
        if grads.get(name).is_none() {
            return Err(Error::Config(format!("no gradient for parameter {name}")));
        }
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
    let (one_b1, one_b2) = (c::<T>(1.0 - cfg.beta1), c::<T>(1.0 - cfg.beta2));
    let eps = c::<T>(cfg.eps);
    let ParameterStore { params, adam } = store;
    for name in names {
        let grad = grads.get(&name).expect("checked above");
        let numel = grad.numel();
        let state = adam.entry(name.clone()).or_insert_with(|| AdamState {
            first_moment: vec![T::zero(); numel],
            second_moment: vec![T::zero(); numel],
            step: 0,
        });
        state.step += 1;
        let t = state.step as i32;
        let bc1 = c::<T>(1.0 - cfg.beta1.powi(t));
        let bc2 = c::<T>(1.0 - cfg.beta2.powi(t));
        let lr = c::<T>(cfg.lr);
        let (m, v) = (&mut state.first_moment, &mut state.second_moment);
        let param = params.get_mut(&name).expect("registered parameter");
        if param.numel() != numel {
            return Err(Error::Shape(format!("gradient size mismatch for {name}")));
        }
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(c(max_norm / norm));
    }
    Ok(norm)
}
